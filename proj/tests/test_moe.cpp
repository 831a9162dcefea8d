#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "intermoe/moe.hpp"
#include "test_util.hpp"

using namespace intermoe;

namespace {

Tensor<double> randt(std::vector<int> shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    auto rng = make_rng(seed);
    return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

// scalar per-token gating oracle, mirroring the op order of the library path
struct NaiveGating {
    Tensor<double> a, m, g;
    std::vector<std::vector<int>> selected;
};

NaiveGating naive_dynamic_gating(const Tensor<double>& r, const std::vector<double>& b) {
    const int S = r.dim(0), N = r.dim(1);
    NaiveGating out;
    out.a = Tensor<double>::zeros({S, N});
    out.m = Tensor<double>::zeros({S, N});
    out.g = Tensor<double>::zeros({S, N});
    out.selected.resize(static_cast<size_t>(N));
    for (int s = 0; s < S; ++s) {
        double mx = r.at(s, 0);
        for (int e = 1; e < N; ++e) mx = std::max(mx, r.at(s, e));
        double sum = 0.0;
        for (int e = 0; e < N; ++e) {
            out.a.at(s, e) = std::exp(r.at(s, e) - mx);
            sum += out.a.at(s, e);
        }
        for (int e = 0; e < N; ++e) out.a.at(s, e) /= sum;
        for (int e = 0; e < N; ++e) {
            out.m.at(s, e) = 1.0 / (1.0 + std::exp(-r.at(s, e))) + b[static_cast<size_t>(e)];
            if (out.m.at(s, e) > 0.0) {
                out.g.at(s, e) = out.a.at(s, e);
                out.selected[static_cast<size_t>(e)].push_back(s);
            }
        }
    }
    return out;
}

// dense evaluation: every expert sees every token, gates from the decision
Tensor<double> dense_mixture(const Var<double>& pool, const Tensor<double>& gates,
                             const std::vector<ExpertFFN<double>>& experts) {
    NoGradGuard ng;
    const int S = pool.value().dim(0), D = pool.value().dim(1);
    Tensor<double> out = Tensor<double>::zeros({S, D});
    for (size_t e = 0; e < experts.size(); ++e) {
        auto y = experts[e](pool).value();
        for (int s = 0; s < S; ++s)
            for (int d = 0; d < D; ++d)
                out.at(s, d) += gates.at(s, static_cast<int>(e)) * y.at(s, d);
    }
    return out;
}

std::vector<ExpertFFN<double>> make_experts(int n, int d, uint64_t seed) {
    auto rng = make_rng(seed);
    std::vector<ExpertFFN<double>> ex;
    for (int e = 0; e < n; ++e) ex.emplace_back(d, 2 * d, rng);
    return ex;
}

}  // namespace

TEST_CASE("motion routing equals a per-token loop") {
    RouterConfig rc;
    rc.n_experts = 5;
    rc.d_m = 7;
    rc.d_t = 3;
    auto rng = make_rng(1);
    SynergisticRouter<double> router(rc, rng);

    // zero weights and bias -> zero logits (bias starts at zero)
    auto rng_z = make_rng(2);
    SynergisticRouter<double> zero_router(rc, rng_z);
    zero_router.motion.w.set_value(Tensor<double>::zeros({7, 5}));
    auto z = zero_router.route_motion(Var<double>::constant(randt({6, 7}, 2)));
    for (int64_t i = 0; i < z.numel(); ++i) REQUIRE(z.value()[i] == 0.0);

    Tensor<double> pool = randt({4 * 8, 7}, 3);  // B=4, T'=8 -> S=32
    REQUIRE(pool.dim(0) == 32);
    auto logits = router.route_motion(Var<double>::constant(pool)).value();
    const auto& w = router.motion.w.value();
    const auto& b = router.motion.b.value();
    for (int s = 0; s < 32; ++s)
        for (int e = 0; e < 5; ++e) {
            double acc = 0.0;
            for (int c = 0; c < 7; ++c) acc += pool.at(s, c) * w.at(c, e);
            REQUIRE(logits.at(s, e) == Catch::Approx(b[e] + acc).margin(1e-12));
        }
}

TEST_CASE("text routing broadcasts one row per sample across its tokens") {
    RouterConfig rc;
    rc.n_experts = 4;
    rc.d_m = 5;
    rc.d_t = 6;
    auto rng = make_rng(4);
    SynergisticRouter<double> router(rc, rng);

    Tensor<double> text = randt({3, 6}, 5);
    // samples 0 and 2 carry identical text
    for (int c = 0; c < 6; ++c) text.at(2, c) = text.at(0, c);
    auto rt = router.route_text(Var<double>::constant(text), 7).value();
    REQUIRE(rt.shape == std::vector<int>{21, 4});
    auto per_sample = router.text(Var<double>::constant(text)).value();
    for (int s = 0; s < 21; ++s)
        for (int e = 0; e < 4; ++e)
            REQUIRE(std::bit_cast<uint64_t>(rt.at(s, e)) ==
                    std::bit_cast<uint64_t>(per_sample.at(s / 7, e)));
    for (int t = 0; t < 7; ++t)
        for (int e = 0; e < 4; ++e)
            REQUIRE(rt.at(0 * 7 + t, e) == rt.at(2 * 7 + t, e));

    // zero embedding and zero bias -> zero logits
    auto rz = router.route_text(Var<double>::constant(Tensor<double>::zeros({2, 6})), 3);
    for (int64_t i = 0; i < rz.numel(); ++i) REQUIRE(rz.value()[i] == 0.0);
}

TEST_CASE("logit blending endpoints and midpoint") {
    auto rm = Var<double>::constant(randt({5, 3}, 7));
    auto rt = Var<double>::constant(randt({5, 3}, 8));
    auto c1 = combine_logits(rm, rt, 1.0);
    auto c0 = combine_logits(rm, rt, 0.0);
    for (int64_t i = 0; i < rm.numel(); ++i) {
        REQUIRE(c1.value()[i] == rm.value()[i]);
        REQUIRE(c0.value()[i] == rt.value()[i]);
    }
    auto mid = combine_logits(Var<double>::constant(Tensor<double>::full({1, 1}, 2.0)),
                              Var<double>::constant(Tensor<double>::full({1, 1}, 4.0)), 0.5);
    REQUIRE(mid.value()[0] == 3.0);
    REQUIRE_THROWS_AS(combine_logits(rm, rt, -0.1), ConfigError);
    REQUIRE_THROWS_AS(combine_logits(rm, rt, 1.5), ConfigError);
}

TEST_CASE("threshold rule hand cases") {
    auto logits = Var<double>::constant(Tensor<double>::zeros({1, 2}));
    ExpertBiasState loose(2);
    loose.b = {-0.4, -0.4};
    auto d = dynamic_select(logits, loose);
    REQUIRE(d.m.at(0, 0) == Catch::Approx(0.1).margin(1e-12));
    REQUIRE(d.g.value().at(0, 0) == 0.5);
    REQUIRE(d.g.value().at(0, 1) == 0.5);
    REQUIRE(d.k_select == std::vector<int64_t>{1, 1});

    ExpertBiasState tight(2);
    tight.b = {-0.6, -0.6};
    auto d2 = dynamic_select(logits, tight);
    REQUIRE(d2.g.value().at(0, 0) == 0.0);
    REQUIRE(d2.g.value().at(0, 1) == 0.0);
    REQUIRE(d2.k_select == std::vector<int64_t>{0, 0});
}

TEST_CASE("gating matches the scalar oracle bitwise and holds its invariants") {
    auto rng = make_rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int N = 2 + static_cast<int>(rng() % 7);  // up to 8
        const int S = 4 + static_cast<int>(rng() % 61);  // up to 64
        Tensor<double> r = Tensor<double>::uniform({S, N}, rng, -3.0, 3.0);
        ExpertBiasState bias(N);
        for (auto& b : bias.b) b = -0.05 - 0.9 * (static_cast<double>(rng() % 1000) / 1000.0);

        auto d = dynamic_select(Var<double>::constant(r), bias);
        auto ref = naive_dynamic_gating(r, bias.b);
        REQUIRE(d.a.value().data == ref.a.data);
        REQUIRE(d.m.data == ref.m.data);
        REQUIRE(d.g.value().data == ref.g.data);
        REQUIRE(d.selected == ref.selected);

        for (int s = 0; s < S; ++s) {
            double row = 0.0;
            for (int e = 0; e < N; ++e) {
                const double a = d.a.value().at(s, e), g = d.g.value().at(s, e);
                row += a;
                REQUIRE(g >= 0.0);
                REQUIRE(g <= a);
                REQUIRE(a <= 1.0);
                REQUIRE((g == 0.0 || g == a));
            }
            REQUIRE(row == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("raising an expert's bias never shrinks its selection count") {
    Tensor<double> r = randt({48, 4}, 12, -3.0, 3.0);
    ExpertBiasState bias(4);
    std::vector<int64_t> prev(4, 0);
    for (double lift = 0.0; lift < 0.9; lift += 0.05) {
        for (int e = 0; e < 4; ++e) bias.b[static_cast<size_t>(e)] = -0.95 + lift;
        auto d = dynamic_select(Var<double>::constant(r), bias);
        for (int e = 0; e < 4; ++e) REQUIRE(d.k_select[static_cast<size_t>(e)] >= prev[static_cast<size_t>(e)]);
        prev = d.k_select;
    }
}

TEST_CASE("bias sign rule, clamping and inference guard") {
    MoEConfig mc;
    REQUIRE(mc.k_expected(240, 8) == 30.0);

    ExpertBiasState st(3);
    count_and_update_bias({10, 8, 6}, 8.0, st);
    REQUIRE(st.b[0] == Catch::Approx(-0.5001).margin(1e-15));
    REQUIRE(st.b[1] == Catch::Approx(-0.5).margin(1e-15));  // sign(0) = 0
    REQUIRE(st.b[2] == Catch::Approx(-0.4999).margin(1e-15));
    REQUIRE(st.last_k_select == std::vector<int64_t>{10, 8, 6});

    // clamping keeps b inside the open interval
    ExpertBiasState edge(1);
    edge.b = {-1e-6};
    count_and_update_bias({0}, 5.0, edge);  // pushes up, must stay below 0
    REQUIRE(edge.b[0] == -1e-6);
    edge.b = {-1.0 + 1e-6};
    count_and_update_bias({9}, 5.0, edge);  // pushes down, must stay above -1
    REQUIRE(edge.b[0] == -1.0 + 1e-6);

    NoGradGuard ng;
    REQUIRE_THROWS_AS(count_and_update_bias({1}, 1.0, edge), ConfigError);
}

TEST_CASE("bias trajectory equalizes selection counts on stationary logits") {
    const int N = 4, S = 64;
    const double k_exp = 16.0;  // C_exp = 1
    ExpertBiasState st(N);
    auto rng = make_rng(99);
    // per-expert logit offsets make the initial counts badly imbalanced
    const double off[N] = {-1.2, -0.3, 0.4, 1.5};
    std::vector<double> count_sum(N, 0.0);
    const int steps = 20000, tail = 1000;
    for (int step = 0; step < steps; ++step) {
        Tensor<double> r = Tensor<double>::zeros({S, N});
        std::normal_distribution<double> nd(0.0, 1.0);
        for (int s = 0; s < S; ++s)
            for (int e = 0; e < N; ++e) r.at(s, e) = off[e] + nd(rng);
        auto d = dynamic_select(Var<double>::constant(r), st);
        count_and_update_bias(d.k_select, k_exp, st);
        if (step >= steps - tail)
            for (int e = 0; e < N; ++e) count_sum[static_cast<size_t>(e)] += static_cast<double>(d.k_select[static_cast<size_t>(e)]);
    }
    for (int e = 0; e < N; ++e) {
        const double mean = count_sum[static_cast<size_t>(e)] / tail;
        REQUIRE(std::abs(mean - k_exp) <= std::max(1.0, 0.1 * k_exp));
    }
}

TEST_CASE("dispatch matches dense evaluation on random instances") {
    auto rng = make_rng(21);
    for (int trial = 0; trial < 8; ++trial) {
        const int N = 2 + static_cast<int>(rng() % 7);
        const int S = 4 + static_cast<int>(rng() % 61);
        const int D = 4 + static_cast<int>(rng() % 9);
        auto experts = make_experts(N, D, rng());
        Tensor<double> pv = Tensor<double>::uniform({S, D}, rng, -1.0, 1.0);
        Tensor<double> r = Tensor<double>::uniform({S, N}, rng, -2.0, 2.0);
        ExpertBiasState bias(N);
        for (auto& b : bias.b) b = -0.05 - 0.9 * (static_cast<double>(rng() % 1000) / 1000.0);

        auto pool = Var<double>::constant(pv);
        auto d = dynamic_select(Var<double>::constant(r), bias);
        auto sparse = moe_dispatch(pool, d, experts).value();
        auto dense = dense_mixture(pool, d.g.value(), experts);
        for (int64_t i = 0; i < sparse.numel(); ++i)
            REQUIRE(sparse[i] == Catch::Approx(dense[i]).margin(1e-6));
    }
}

TEST_CASE("dispatch edge cases: total drop and a single saturated expert") {
    const int S = 6, D = 5;
    auto experts = make_experts(1, D, 31);
    auto pool = Var<double>::constant(randt({S, D}, 32));

    // bias so low that nothing is selected
    ExpertBiasState shut(1);
    shut.b = {-1.0 + 1e-6};
    auto d0 = dynamic_select(Var<double>::constant(randt({S, 1}, 33)), shut);
    auto out0 = moe_dispatch(pool, d0, experts).value();
    for (int64_t i = 0; i < out0.numel(); ++i) REQUIRE(out0[i] == 0.0);

    // one expert, wide open: softmax over a single expert gives gate exactly 1
    ExpertBiasState open(1);
    open.b = {-1e-6};
    auto d1 = dynamic_select(Var<double>::constant(randt({S, 1}, 34)), open);
    REQUIRE(d1.k_select == std::vector<int64_t>{S});
    auto out1 = moe_dispatch(pool, d1, experts).value();
    auto plain = experts[0](pool).value();
    REQUIRE(out1.data == plain.data);
}

TEST_CASE("token choice: full k is dense, k=1 is a singleton with unit gate") {
    auto rng = make_rng(41);
    const int S = 20, N = 5, D = 6;
    auto experts = make_experts(N, D, 42);
    Tensor<double> r = Tensor<double>::uniform({S, N}, rng, -2.0, 2.0);
    auto pool = Var<double>::constant(randt({S, D}, 43));

    auto d_full = token_choice_select(Var<double>::constant(r), N);
    auto out_full = moe_dispatch(pool, d_full, experts).value();
    auto a = softmax_lastdim(Var<double>::constant(r)).value();
    auto dense = dense_mixture(pool, a, experts);
    for (int64_t i = 0; i < out_full.numel(); ++i)
        REQUIRE(out_full[i] == Catch::Approx(dense[i]).margin(1e-9));

    auto d1 = token_choice_select(Var<double>::constant(r), 1);
    for (int s = 0; s < S; ++s) {
        int hits = 0;
        for (int e = 0; e < N; ++e)
            if (d1.g.value().at(s, e) != 0.0) {
                ++hits;
                REQUIRE(d1.g.value().at(s, e) == 1.0);  // A_max / A_max
                for (int o = 0; o < N; ++o)
                    REQUIRE(r.at(s, o) <= r.at(s, e));
            }
        REQUIRE(hits == 1);
    }

    REQUIRE_THROWS_AS(token_choice_select(Var<double>::constant(r), 0), ConfigError);
    REQUIRE_THROWS_AS(token_choice_select(Var<double>::constant(r), N + 1), ConfigError);
}

TEST_CASE("expert choice: full capacity processes everything, counts stay fixed") {
    auto rng = make_rng(51);
    const int S = 18, N = 4, D = 5;
    auto experts = make_experts(N, D, 52);
    Tensor<double> r = Tensor<double>::uniform({S, N}, rng, -2.0, 2.0);
    auto pool = Var<double>::constant(randt({S, D}, 53));

    auto d_full = expert_choice_select(Var<double>::constant(r), S);
    REQUIRE(d_full.k_select == std::vector<int64_t>(N, S));
    auto out_full = moe_dispatch(pool, d_full, experts).value();
    auto a = softmax_lastdim(Var<double>::constant(r)).value();
    auto dense = dense_mixture(pool, a, experts);
    for (int64_t i = 0; i < out_full.numel(); ++i)
        REQUIRE(out_full[i] == Catch::Approx(dense[i]).margin(1e-9));

    auto d3 = expert_choice_select(Var<double>::constant(r), 3);
    REQUIRE(d3.k_select == std::vector<int64_t>(N, 3));
    // gates are raw softmax values for the kept pairs
    for (int e = 0; e < N; ++e)
        for (int s : d3.selected[static_cast<size_t>(e)])
            REQUIRE(d3.g.value().at(s, e) == a.at(s, e));

    REQUIRE_THROWS_AS(expert_choice_select(Var<double>::constant(r), 0), ConfigError);
    REQUIRE_THROWS_AS(expert_choice_select(Var<double>::constant(r), S + 1), ConfigError);
}

TEST_CASE("moe layer gradients pass finite differences away from the threshold") {
    RouterConfig rc;
    rc.n_experts = 3;
    rc.d_m = 6;
    rc.d_t = 4;
    MoEConfig mc;
    auto rng = make_rng(61);
    MoeLayer<double> layer(rc, mc, rng);

    Tensor<double> pv = randt({10, 6}, 62);
    Tensor<double> tv = randt({2, 4}, 63);
    auto text = Var<double>::constant(tv);
    Tensor<double> mix = randt({10, 6}, 64);

    auto loss_with_pool = [&](const Var<double>& p) {
        return sum_all(mul(layer.forward(p, text), Var<double>::constant(mix)));
    };
    // precondition: selection margins are comfortably away from the threshold
    layer.forward(Var<double>::constant(pv), text);
    const auto& m = layer.last_decision().m;
    double min_margin = 1.0;
    for (int64_t i = 0; i < m.numel(); ++i) min_margin = std::min(min_margin, std::abs(m[i]));
    REQUIRE(min_margin > 1e-3);

    REQUIRE(finite_difference_check<double>(loss_with_pool, pv, 1e-5) < 1e-6);

    auto loss_fn = [&]() {
        return sum_all(mul(layer.forward(Var<double>::constant(pv), text),
                           Var<double>::constant(mix)));
    };
    auto params = layer.named_params();
    for (const auto& name :
         {"router.motion.w", "router.text.w", "expert0.w1", "expert1.b1", "expert2.w2"}) {
        auto it = std::find_if(params.begin(), params.end(),
                               [&](const auto& p) { return p.first == name; });
        REQUIRE(it != params.end());
        REQUIRE(testutil::fd_check_param<double>(loss_fn, it->second) < 1e-6);
    }
}

TEST_CASE("instance-level routing with one sample equals batch-level routing") {
    RouterConfig rc;
    rc.n_experts = 4;
    rc.d_m = 5;
    rc.d_t = 3;
    MoEConfig mc;
    auto rng1 = make_rng(71);
    auto rng2 = make_rng(71);
    MoeLayer<double> batch_layer(rc, mc, rng1);
    rc.routing_scope = RoutingScope::instance_level;
    MoeLayer<double> inst_layer(rc, mc, rng2);

    auto pool = Var<double>::constant(randt({12, 5}, 72));
    auto text = Var<double>::constant(randt({1, 3}, 73));
    auto ob = batch_layer.forward(pool, text).value();
    auto oi = inst_layer.forward(pool, text).value();
    REQUIRE(ob.data == oi.data);
    REQUIRE(batch_layer.last_decision().k_select == inst_layer.last_decision().k_select);
    REQUIRE(batch_layer.last_decision().g.value().data ==
            inst_layer.last_decision().g.value().data);
}

TEST_CASE("instance-level routing splits the pool per sample") {
    RouterConfig rc;
    rc.n_experts = 3;
    rc.d_m = 4;
    rc.d_t = 3;
    rc.routing_scope = RoutingScope::instance_level;
    MoEConfig mc;
    mc.mode = MoeMode::expert_choice;  // capacity derives from the per-instance length
    auto rng = make_rng(81);
    MoeLayer<double> layer(rc, mc, rng);

    const int B = 3, Tp = 6;
    auto pool = Var<double>::constant(randt({B * Tp, 4}, 82));
    auto text = Var<double>::constant(randt({B, 3}, 83));
    layer.forward(pool, text);
    const auto& d = layer.last_decision();
    // expert-choice with C_exp=1: capacity 2 per instance, 3 instances
    REQUIRE(d.k_select == std::vector<int64_t>(3, 6));
    for (const auto& rows : d.selected) {
        int per_instance[B] = {0, 0, 0};
        for (int s : rows) ++per_instance[s / Tp];
        for (int i = 0; i < B; ++i) REQUIRE(per_instance[i] == 2);
    }
}

TEST_CASE("layer bias update moves each expert by one sigma step") {
    RouterConfig rc;
    rc.n_experts = 2;
    rc.d_m = 4;
    rc.d_t = 3;
    MoEConfig mc;
    auto rng = make_rng(91);
    MoeLayer<double> layer(rc, mc, rng);
    REQUIRE_THROWS_AS(layer.update_bias(), ConfigError);

    auto pool = Var<double>::constant(randt({8, 4}, 92));
    auto text = Var<double>::constant(randt({2, 3}, 93));
    layer.forward(pool, text);
    const auto before = layer.bias_state().b;
    const auto counts = layer.last_decision().k_select;
    layer.update_bias();
    const double k_exp = 1.0 * 8 / 2;
    for (int e = 0; e < 2; ++e) {
        const double delta = layer.bias_state().b[static_cast<size_t>(e)] - before[static_cast<size_t>(e)];
        const double diff = static_cast<double>(counts[static_cast<size_t>(e)]) - k_exp;
        if (diff > 0) REQUIRE(delta == Catch::Approx(-1e-4).margin(1e-15));
        else if (diff < 0) REQUIRE(delta == Catch::Approx(1e-4).margin(1e-15));
        else REQUIRE(delta == 0.0);
    }
}

TEST_CASE("bias round trip through the tensor accessors") {
    RouterConfig rc;
    rc.n_experts = 4;
    rc.d_m = 4;
    rc.d_t = 3;
    auto rng = make_rng(95);
    MoeLayer<float> layer(rc, MoEConfig{}, rng);
    Tensor<float> t({4}, {-0.25f, -0.5f, -0.75f, -0.125f});
    layer.set_bias_tensor(t);
    REQUIRE(layer.bias_tensor().data == t.data);
    REQUIRE_THROWS_AS(layer.set_bias_tensor(Tensor<float>::zeros({3})), ConfigError);
}

TEST_CASE("telemetry rows carry one line per expert") {
    std::ostringstream os;
    os << routing_telemetry_header() << '\n';
    append_routing_telemetry(os, 7, 2, {30, 28}, 29.5, {-0.41, -0.52});
    const std::string text = os.str();
    REQUIRE(text.find("step,block,expert,k_select,k_exp,b_e") == 0);
    REQUIRE(text.find("7,2,0,30,29.5,-0.41") != std::string::npos);
    REQUIRE(text.find("7,2,1,28,29.5,-0.52") != std::string::npos);
}
