#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "intermoe/autodiff.hpp"
#include "intermoe/layers.hpp"
#include "intermoe/motion.hpp"

namespace intermoe {

// ----------------------------- skeletal graph ops -----------------------------

// Graph convolution over joints: out_j = W_self(x_j) + b + mean_{n in N(j)} W_nb(x_n).
// x: [F*J x Cin] with rows ordered [frame][joint]; isolated joints (empty N(j))
// take the self term only.
template <typename T>
Var<T> skeletal_conv(const Var<T>& x, const Var<T>& w_self, const Var<T>& w_nb, const Var<T>& b,
                     const std::vector<std::vector<int>>& neighbors) {
    const auto& xv = x.value();
    const int J = static_cast<int>(neighbors.size());
    if (xv.ndim() != 2 || J == 0 || xv.dim(0) % J != 0)
        throw ShapeError("skeletal_conv: " + shape_to_string(xv.shape) + " with J=" +
                         std::to_string(J));
    const auto& wsv = w_self.value();
    const auto& wnv = w_nb.value();
    const int Cin = xv.dim(1);
    if (wsv.ndim() != 2 || wsv.dim(0) != Cin || wnv.shape != wsv.shape)
        throw ShapeError("skeletal_conv: weights " + shape_to_string(wsv.shape) + "/" +
                         shape_to_string(wnv.shape) + " vs Cin=" + std::to_string(Cin));
    const int Cout = wsv.dim(1);
    if (b.value().numel() != Cout) throw ShapeError("skeletal_conv: bias shape");
    const int F = xv.dim(0) / J;
    const int R = xv.dim(0);

    Tensor<T> nbmean = Tensor<T>::zeros({R, Cin});
    for (int f = 0; f < F; ++f) {
        for (int j = 0; j < J; ++j) {
            if (neighbors[j].empty()) continue;
            T* row = nbmean.data.data() + (static_cast<size_t>(f) * J + j) * Cin;
            for (int n : neighbors[j])
                detail::axpy(row, xv.data.data() + (static_cast<size_t>(f) * J + n) * Cin, T(1), Cin);
            const T inv = T(1) / static_cast<T>(neighbors[j].size());
            for (int c = 0; c < Cin; ++c) row[c] *= inv;
        }
    }
    Tensor<T> out = Tensor<T>::zeros({R, Cout});
    for (int r = 0; r < R; ++r) {
        T* orow = out.data.data() + static_cast<size_t>(r) * Cout;
        for (int co = 0; co < Cout; ++co) orow[co] = b.value()[co];
        const T* xrow = xv.data.data() + static_cast<size_t>(r) * Cin;
        const T* mrow = nbmean.data.data() + static_cast<size_t>(r) * Cin;
        for (int ci = 0; ci < Cin; ++ci)
            detail::axpy(orow, wsv.data.data() + static_cast<size_t>(ci) * Cout, xrow[ci], Cout);
        for (int ci = 0; ci < Cin; ++ci)
            detail::axpy(orow, wnv.data.data() + static_cast<size_t>(ci) * Cout, mrow[ci], Cout);
    }
    Tensor<T> xsaved = xv, msaved = nbmean, wss = wsv, wns = wnv;
    return detail::make_op<T>(
        "skeletal_conv", std::move(out), {x, w_self, w_nb, b},
        [F, J, Cin, Cout, neighbors, xsaved = std::move(xsaved), msaved = std::move(msaved),
         wss = std::move(wss), wns = std::move(wns)](Node<T>& n) {
            auto& px = *n.parents[0];
            auto& pws = *n.parents[1];
            auto& pwn = *n.parents[2];
            auto& pbias = *n.parents[3];
            const int R = F * J;
            if (pbias.requires_grad) {
                pbias.ensure_grad();
                for (int r = 0; r < R; ++r)
                    for (int co = 0; co < Cout; ++co)
                        pbias.grad[co] += n.grad[static_cast<int64_t>(r) * Cout + co];
            }
            if (pws.requires_grad) {
                pws.ensure_grad();
                for (int r = 0; r < R; ++r) {
                    const T* grow = n.grad.data.data() + static_cast<size_t>(r) * Cout;
                    const T* xrow = xsaved.data.data() + static_cast<size_t>(r) * Cin;
                    for (int ci = 0; ci < Cin; ++ci)
                        detail::axpy(pws.grad.data.data() + static_cast<size_t>(ci) * Cout, grow,
                                     xrow[ci], Cout);
                }
            }
            if (pwn.requires_grad) {
                pwn.ensure_grad();
                for (int r = 0; r < R; ++r) {
                    const T* grow = n.grad.data.data() + static_cast<size_t>(r) * Cout;
                    const T* mrow = msaved.data.data() + static_cast<size_t>(r) * Cin;
                    for (int ci = 0; ci < Cin; ++ci)
                        detail::axpy(pwn.grad.data.data() + static_cast<size_t>(ci) * Cout, grow,
                                     mrow[ci], Cout);
                }
            }
            if (px.requires_grad) {
                px.ensure_grad();
                Tensor<T> gnb = Tensor<T>::zeros({R, Cin});
                for (int r = 0; r < R; ++r) {
                    const T* grow = n.grad.data.data() + static_cast<size_t>(r) * Cout;
                    T* gxrow = px.grad.data.data() + static_cast<size_t>(r) * Cin;
                    T* gnrow = gnb.data.data() + static_cast<size_t>(r) * Cin;
                    for (int ci = 0; ci < Cin; ++ci) {
                        gxrow[ci] += detail::dot8(grow, wss.data.data() + static_cast<size_t>(ci) * Cout, Cout);
                        gnrow[ci] = detail::dot8(grow, wns.data.data() + static_cast<size_t>(ci) * Cout, Cout);
                    }
                }
                for (int f = 0; f < F; ++f)
                    for (int j = 0; j < J; ++j) {
                        if (neighbors[j].empty()) continue;
                        const T inv = T(1) / static_cast<T>(neighbors[j].size());
                        const T* gnrow = gnb.data.data() + (static_cast<size_t>(f) * J + j) * Cin;
                        for (int nb : neighbors[j])
                            detail::axpy(px.grad.data.data() + (static_cast<size_t>(f) * J + nb) * Cin,
                                         gnrow, inv, Cin);
                    }
            }
        });
}

// Average each joint group of one pooling level: [F*Jin x C] -> [F*Jout x C].
template <typename T>
Var<T> skeletal_pool(const Var<T>& x, const std::vector<std::vector<int>>& groups, int j_in) {
    const auto& xv = x.value();
    if (xv.ndim() != 2 || j_in <= 0 || xv.dim(0) % j_in != 0)
        throw ShapeError("skeletal_pool: " + shape_to_string(xv.shape) + " with Jin=" +
                         std::to_string(j_in));
    const int F = xv.dim(0) / j_in, C = xv.dim(1);
    const int j_out = static_cast<int>(groups.size());
    Tensor<T> out = Tensor<T>::zeros({F * j_out, C});
    for (int f = 0; f < F; ++f)
        for (int g = 0; g < j_out; ++g) {
            T* orow = out.data.data() + (static_cast<size_t>(f) * j_out + g) * C;
            for (int j : groups[g])
                detail::axpy(orow, xv.data.data() + (static_cast<size_t>(f) * j_in + j) * C, T(1), C);
            const T inv = T(1) / static_cast<T>(groups[g].size());
            for (int c = 0; c < C; ++c) orow[c] *= inv;
        }
    return detail::make_op<T>("skeletal_pool", std::move(out), {x},
                              [F, C, j_in, j_out, groups](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int f = 0; f < F; ++f)
                                      for (int g = 0; g < j_out; ++g) {
                                          const T inv = T(1) / static_cast<T>(groups[g].size());
                                          const T* grow = n.grad.data.data() +
                                                          (static_cast<size_t>(f) * j_out + g) * C;
                                          for (int j : groups[g])
                                              detail::axpy(p.grad.data.data() +
                                                               (static_cast<size_t>(f) * j_in + j) * C,
                                                           grow, inv, C);
                                      }
                              });
}

// Copy each pooled joint's feature to all its group members: [F*Jout x C] -> [F*Jin x C].
template <typename T>
Var<T> skeletal_unpool(const Var<T>& x, const std::vector<std::vector<int>>& groups, int j_in) {
    const auto& xv = x.value();
    const int j_out = static_cast<int>(groups.size());
    if (xv.ndim() != 2 || xv.dim(0) % j_out != 0)
        throw ShapeError("skeletal_unpool: " + shape_to_string(xv.shape));
    const int F = xv.dim(0) / j_out, C = xv.dim(1);
    Tensor<T> out = Tensor<T>::zeros({F * j_in, C});
    for (int f = 0; f < F; ++f)
        for (int g = 0; g < j_out; ++g) {
            const T* row = xv.data.data() + (static_cast<size_t>(f) * j_out + g) * C;
            for (int j : groups[g])
                std::copy_n(row, C, out.data.data() + (static_cast<size_t>(f) * j_in + j) * C);
        }
    return detail::make_op<T>("skeletal_unpool", std::move(out), {x},
                              [F, C, j_in, j_out, groups](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int f = 0; f < F; ++f)
                                      for (int g = 0; g < j_out; ++g) {
                                          T* grow = p.grad.data.data() +
                                                    (static_cast<size_t>(f) * j_out + g) * C;
                                          for (int j : groups[g])
                                              detail::axpy(grow,
                                                           n.grad.data.data() +
                                                               (static_cast<size_t>(f) * j_in + j) * C,
                                                           T(1), C);
                                      }
                              });
}

// ----------------------------- layers -----------------------------

template <typename T>
struct SkeletalConvLayer {
    Var<T> w_self, w_nb, b;

    SkeletalConvLayer() = default;
    SkeletalConvLayer(int in, int out, std::mt19937_64& rng, double gain = 1.0) {
        const T s = static_cast<T>(gain / std::sqrt(2.0 * in));
        for (Var<T>* w : {&w_self, &w_nb}) {
            Tensor<T> wt = Tensor<T>::randn({in, out}, rng);
            for (auto& v : wt.data) v *= s;
            *w = Var<T>::leaf(std::move(wt), true);
        }
        b = Var<T>::leaf(Tensor<T>::zeros({out}), true);
    }
    Var<T> operator()(const Var<T>& x, const std::vector<std::vector<int>>& neighbors) const {
        return skeletal_conv(x, w_self, w_nb, b, neighbors);
    }
};

// Causal temporal convolution: left pad (k-1)*d + (1-s) zero frames, so output
// frame t sees nothing later than input frame s*(t+1)-1.
template <typename T>
struct CausalConvLayer {
    int kernel = 3, stride = 1, dilation = 1;
    Var<T> w, b;  // {k, in, out}, {out}

    CausalConvLayer() = default;
    CausalConvLayer(int in, int out, int k, int s, int d, std::mt19937_64& rng, double gain = 1.0)
        : kernel(k), stride(s), dilation(d) {
        Tensor<T> wt = Tensor<T>::randn({k, in, out}, rng);
        const T sc = static_cast<T>(gain / std::sqrt(static_cast<double>(k) * in));
        for (auto& v : wt.data) v *= sc;
        w = Var<T>::leaf(std::move(wt), true);
        b = Var<T>::leaf(Tensor<T>::zeros({out}), true);
    }
    int left_pad() const { return (kernel - 1) * dilation + (1 - stride); }
    Var<T> operator()(const Var<T>& x, int n_series = 1) const {
        return conv1d(x, w, b, stride, dilation, left_pad(), n_series);
    }
};

// ----------------------------- row-order permutations -----------------------------

// [sample][time][joint] row order -> [sample][joint][time]
inline std::vector<int> frames_to_series(int B, int T, int J) {
    std::vector<int> idx(static_cast<size_t>(B) * T * J);
    size_t o = 0;
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < J; ++j)
            for (int t = 0; t < T; ++t) idx[o++] = (b * T + t) * J + j;
    return idx;
}

// [sample][joint][time] row order -> [sample][time][joint]
inline std::vector<int> series_to_frames(int B, int T, int J) {
    std::vector<int> idx(static_cast<size_t>(B) * T * J);
    size_t o = 0;
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < J; ++j) idx[o++] = (b * J + j) * T + t;
    return idx;
}

// ----------------------------- the VAE -----------------------------

struct CsVaeConfig {
    int channels = 32;  // hidden width per joint
    int d_z = 32;       // latent width per pooled joint
    int kernel = 3;
    uint64_t init_seed = 1;
};

// Hierarchical causal-skeletal VAE. Two levels, each with two skeletal convs
// and two causal convs; joints pool 9->4 at level 1, time halves per level
// (T' = T/4). The decoder mirrors the encoder with the stages reversed.
template <typename T>
class CsVae {
  public:
    CsVae(SkeletonTopology topo, CsVaeConfig cfg) : topo_(std::move(topo)), cfg_(cfg) {
        if (topo_.pooling_tree.empty()) throw ConfigError("csvae: topology has no pooling tree");
        auto rng = make_rng(cfg_.init_seed);
        const int C = cfg_.channels, k = cfg_.kernel;
        j1_ = topo_.level_joints(1);
        nb1_ = pooled_neighbors();
        enc_sk1_ = SkeletalConvLayer<T>(kFeatureWidth, C, rng);
        enc_sk2_ = SkeletalConvLayer<T>(C, C, rng);
        enc_cc1_ = CausalConvLayer<T>(C, C, k, 1, 1, rng);
        enc_cc2_ = CausalConvLayer<T>(C, C, k, 1, 2, rng);
        enc_sk3_ = SkeletalConvLayer<T>(C, C, rng);
        enc_sk4_ = SkeletalConvLayer<T>(C, C, rng);
        enc_cc3_ = CausalConvLayer<T>(C, C, k, 1, 1, rng);
        enc_cc4_ = CausalConvLayer<T>(C, C, k, 1, 2, rng);
        head_mu_ = Linear<T>(C, cfg_.d_z, rng);
        head_lv_ = Linear<T>(C, cfg_.d_z, rng, 0.1);
        dec_in_ = Linear<T>(cfg_.d_z, C, rng);
        dec_cc1_ = CausalConvLayer<T>(C, C, k, 1, 2, rng);
        dec_cc2_ = CausalConvLayer<T>(C, C, k, 1, 1, rng);
        dec_sk1_ = SkeletalConvLayer<T>(C, C, rng);
        dec_sk2_ = SkeletalConvLayer<T>(C, C, rng);
        dec_cc3_ = CausalConvLayer<T>(C, C, k, 1, 2, rng);
        dec_cc4_ = CausalConvLayer<T>(C, C, k, 1, 1, rng);
        dec_sk3_ = SkeletalConvLayer<T>(C, C, rng);
        dec_sk4_ = SkeletalConvLayer<T>(C, kFeatureWidth, rng, 0.5);
        // Learned per-joint embedding added after the skeletal unpool. Unpooling
        // copies one feature to every joint of a group, and the shared-weight
        // skeletal convs alone cannot tell graph-symmetric group members apart
        // (e.g. two single-joint legs on the same root); the embedding breaks
        // that tie.
        dec_joint_embed_ = Var<T>::leaf(Tensor<T>::zeros({topo_.joint_count * C}), true);
        // start the posterior narrow so early training is nearly deterministic
        Tensor<T> lb = Tensor<T>::zeros({cfg_.d_z});
        for (auto& v : lb.data) v = T(-4);
        head_lv_.b.set_value(std::move(lb));
    }

    const SkeletonTopology& topology() const { return topo_; }
    const CsVaeConfig& config() const { return cfg_; }
    int latent_joints() const { return j1_; }
    int temporal_factor() const { return 4; }  // two halving levels
    int latent_width_flat() const { return j1_ * cfg_.d_z; }

    // x: [B*T*J x 12] normalized features, rows [sample][time][joint].
    // Returns mu, logvar: [B*T' *J1 x d_z].
    std::pair<Var<T>, Var<T>> encode_stats(const Var<T>& x, int n_samples) const {
        const int J = topo_.joint_count;
        const auto& xv = x.value();
        if (xv.ndim() != 2 || xv.dim(1) != kFeatureWidth ||
            xv.dim(0) % (n_samples * J) != 0)
            throw ShapeError("csvae encode: " + shape_to_string(xv.shape));
        const int T0 = xv.dim(0) / (n_samples * J);
        if (T0 % temporal_factor() != 0)
            throw ConfigError("csvae: " + std::to_string(T0) +
                              " frames not divisible by 4; pad or crop the clip");
        auto h = silu(enc_sk1_(x, topo_.neighbors));
        h = silu(enc_sk2_(h, topo_.neighbors));
        h = skeletal_pool(h, topo_.pooling_tree[0], J);
        const int series = n_samples * j1_;
        h = take_rows(h, frames_to_series(n_samples, T0, j1_));
        h = silu(enc_cc1_(h, series));
        h = silu(enc_cc2_(h, series));
        h = avg_pool_pairs(h);
        const int T1 = T0 / 2;
        h = take_rows(h, series_to_frames(n_samples, T1, j1_));
        h = silu(enc_sk3_(h, nb1_));
        h = silu(enc_sk4_(h, nb1_));
        h = take_rows(h, frames_to_series(n_samples, T1, j1_));
        h = silu(enc_cc3_(h, series));
        h = silu(enc_cc4_(h, series));
        h = avg_pool_pairs(h);
        h = take_rows(h, series_to_frames(n_samples, T1 / 2, j1_));
        return {head_mu_(h), head_lv_(h)};
    }

    // z: [B*T'*J1 x d_z] -> [B*T*J x 12]
    Var<T> decode_rows(const Var<T>& z, int n_samples) const {
        const auto& zv = z.value();
        if (zv.ndim() != 2 || zv.dim(1) != cfg_.d_z || zv.dim(0) % (n_samples * j1_) != 0)
            throw ShapeError("csvae decode: " + shape_to_string(zv.shape));
        const int Tp = zv.dim(0) / (n_samples * j1_);
        const int series = n_samples * j1_;
        auto h = silu(dec_in_(z));
        h = take_rows(h, frames_to_series(n_samples, Tp, j1_));
        h = interpolate_linear_x2(h, series);
        h = silu(dec_cc1_(h, series));
        h = silu(dec_cc2_(h, series));
        h = take_rows(h, series_to_frames(n_samples, 2 * Tp, j1_));
        h = silu(dec_sk1_(h, nb1_));
        h = silu(dec_sk2_(h, nb1_));
        h = take_rows(h, frames_to_series(n_samples, 2 * Tp, j1_));
        h = interpolate_linear_x2(h, series);
        h = silu(dec_cc3_(h, series));
        h = silu(dec_cc4_(h, series));
        h = take_rows(h, series_to_frames(n_samples, 4 * Tp, j1_));
        h = skeletal_unpool(h, topo_.pooling_tree[0], topo_.joint_count);
        const int J = topo_.joint_count, C = cfg_.channels;
        h = reshape(h, {n_samples * 4 * Tp, J * C});
        h = add(h, dec_joint_embed_);  // broadcast over frames
        h = reshape(h, {n_samples * 4 * Tp * J, C});
        h = silu(dec_sk3_(h, topo_.neighbors));
        return dec_sk4_(h, topo_.neighbors);
    }

    Var<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, std::mt19937_64& rng) const {
        Tensor<T> eps = Tensor<T>::randn(mu.shape(), rng);
        return add(mu, mul(exp_(scale(logvar, T(0.5))), Var<T>::constant(std::move(eps))));
    }

    std::vector<std::pair<std::string, Var<T>>> named_params() {
        std::vector<std::pair<std::string, Var<T>>> p;
        auto sk = [&](const std::string& n, SkeletalConvLayer<T>& l) {
            p.emplace_back(n + ".w_self", l.w_self);
            p.emplace_back(n + ".w_nb", l.w_nb);
            p.emplace_back(n + ".b", l.b);
        };
        auto cc = [&](const std::string& n, CausalConvLayer<T>& l) {
            p.emplace_back(n + ".w", l.w);
            p.emplace_back(n + ".b", l.b);
        };
        auto li = [&](const std::string& n, Linear<T>& l) {
            p.emplace_back(n + ".w", l.w);
            p.emplace_back(n + ".b", l.b);
        };
        sk("enc.sk1", enc_sk1_);
        sk("enc.sk2", enc_sk2_);
        cc("enc.cc1", enc_cc1_);
        cc("enc.cc2", enc_cc2_);
        sk("enc.sk3", enc_sk3_);
        sk("enc.sk4", enc_sk4_);
        cc("enc.cc3", enc_cc3_);
        cc("enc.cc4", enc_cc4_);
        li("enc.mu", head_mu_);
        li("enc.logvar", head_lv_);
        li("dec.in", dec_in_);
        cc("dec.cc1", dec_cc1_);
        cc("dec.cc2", dec_cc2_);
        sk("dec.sk1", dec_sk1_);
        sk("dec.sk2", dec_sk2_);
        cc("dec.cc3", dec_cc3_);
        cc("dec.cc4", dec_cc4_);
        sk("dec.sk3", dec_sk3_);
        sk("dec.sk4", dec_sk4_);
        p.emplace_back("dec.joint_embed", dec_joint_embed_);
        return p;
    }

    nlohmann::json config_json() const {
        nlohmann::json j;
        j["channels"] = cfg_.channels;
        j["d_z"] = cfg_.d_z;
        j["kernel"] = cfg_.kernel;
        j["joint_count"] = topo_.joint_count;
        j["edges"] = topo_.edges;
        j["pooling_tree"] = topo_.pooling_tree;
        return j;
    }

    static CsVae<T> from_config_json(const nlohmann::json& j) {
        CsVaeConfig cfg;
        cfg.channels = j.at("channels").get<int>();
        cfg.d_z = j.at("d_z").get<int>();
        cfg.kernel = j.at("kernel").get<int>();
        auto topo = SkeletonTopology::from_edges(
            j.at("joint_count").get<int>(),
            j.at("edges").get<std::vector<std::pair<int, int>>>(),
            j.at("pooling_tree").get<std::vector<std::vector<std::vector<int>>>>());
        return CsVae<T>(std::move(topo), cfg);
    }

  private:
    // adjacency of the level-1 pooled joints: groups are adjacent when any of
    // their members were adjacent in the full skeleton
    std::vector<std::vector<int>> pooled_neighbors() const {
        const auto& groups = topo_.pooling_tree[0];
        const int G = static_cast<int>(groups.size());
        std::vector<int> owner(topo_.joint_count, -1);
        for (int g = 0; g < G; ++g)
            for (int j : groups[g]) owner[j] = g;
        std::vector<std::vector<int>> nb(G);
        for (auto [p, c] : topo_.edges) {
            const int gp = owner[p], gc = owner[c];
            if (gp == gc) continue;
            nb[gp].push_back(gc);
            nb[gc].push_back(gp);
        }
        for (auto& v : nb) {
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
        }
        return nb;
    }

    SkeletonTopology topo_;
    CsVaeConfig cfg_;
    int j1_ = 0;
    std::vector<std::vector<int>> nb1_;
    SkeletalConvLayer<T> enc_sk1_, enc_sk2_, enc_sk3_, enc_sk4_;
    CausalConvLayer<T> enc_cc1_, enc_cc2_, enc_cc3_, enc_cc4_;
    Linear<T> head_mu_, head_lv_, dec_in_;
    CausalConvLayer<T> dec_cc1_, dec_cc2_, dec_cc3_, dec_cc4_;
    SkeletalConvLayer<T> dec_sk1_, dec_sk2_, dec_sk3_, dec_sk4_;
    Var<T> dec_joint_embed_;  // {J*C}, see constructor comment
};

// ----------------------------- loss -----------------------------

struct VaeLossWeights {
    double lambda_pos = 0.5;
    double lambda_vel = 0.5;
    double lambda_kl = 0.02;

    void validate() const {
        if (lambda_pos < 0 || lambda_vel < 0 || lambda_kl < 0)
            throw ConfigError("vae loss weights must be nonnegative");
    }
};

inline double vae_weighted_sum(double l_m, double l_pos, double l_vel, double l_kl,
                               const VaeLossWeights& w) {
    return l_m + w.lambda_pos * l_pos + w.lambda_vel * l_vel + w.lambda_kl * l_kl;
}

template <typename T>
struct VaeLossTerms {
    Var<T> total;
    double l_m, l_pos, l_vel, l_kl;
};

// L1 reconstruction over all features / position channels / velocity channels,
// plus the closed-form Gaussian KL to the standard normal. All terms are means
// over their own entries.
template <typename T>
VaeLossTerms<T> vae_loss(const Var<T>& target, const Var<T>& recon, const Var<T>& mu,
                         const Var<T>& logvar, const VaeLossWeights& w) {
    w.validate();
    if (target.shape() != recon.shape() || target.shape().back() != kFeatureWidth)
        throw ShapeError("vae_loss: target " + shape_to_string(target.shape()) + " vs recon " +
                         shape_to_string(recon.shape()));
    auto diff = abs_(sub(recon, target));
    auto l_m = mean_all(diff);

    auto masked_mean = [&](int c0, int count) {
        Tensor<T> mask = Tensor<T>::zeros({kFeatureWidth});
        for (int c = c0; c < c0 + count; ++c) mask[c] = T(1);
        auto sum = sum_all(mul(diff, Var<T>::constant(std::move(mask))));
        const T denom = static_cast<T>(target.numel() / kFeatureWidth * count);
        return scale(sum, T(1) / denom);
    };
    auto l_pos = masked_mean(0, 3);
    auto l_vel = masked_mean(3, 3);

    auto kl_inner = sub(add_scalar(add(square(mu), exp_(logvar)), T(-1)), logvar);
    auto l_kl = scale(mean_all(kl_inner), T(0.5));

    auto total = add(add(l_m, scale(l_pos, static_cast<T>(w.lambda_pos))),
                     add(scale(l_vel, static_cast<T>(w.lambda_vel)),
                         scale(l_kl, static_cast<T>(w.lambda_kl))));
    return {total, static_cast<double>(l_m.value()[0]), static_cast<double>(l_pos.value()[0]),
            static_cast<double>(l_vel.value()[0]), static_cast<double>(l_kl.value()[0])};
}

}  // namespace intermoe
