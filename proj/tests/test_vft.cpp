#include "covft/error.hpp"
#include "covft/rng.hpp"
#include "covft/vft.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace covft;

namespace {

ModelConfig small_config(bool comoe) {
    ModelConfig mc;
    mc.encoder.depth = 2;
    mc.encoder.comoe = comoe;
    mc.encoder.comoe_start = 1;
    mc.encoder.comoe_end = 1;
    mc.encoder.feature_layer = 1;
    mc.decoder.depth = 1;
    mc.init_seed = 5;
    return mc;
}

Model make(const std::string& strategy) {
    const Strategy s = Strategy::parse(strategy);
    return Model(configure_model(small_config(strategy == "covft"), s));
}

Dataset tiny_data(std::size_t n, std::uint64_t seed) {
    const auto kinds = diversity_kinds(3);
    return build_dataset(kinds, n, 1.0, seed);
}

}  // namespace

TEST_SUITE("vft") {
TEST_CASE("strategy names round trip") {
    for (const char* n : {"freeze", "full_ft", "bitfit", "lora", "vpt", "covft"}) CHECK(Strategy::parse(n).name() == n);
    CHECK_THROWS_AS(Strategy::parse("adapter"), ConfigError);
    CHECK_THROWS_AS(configure_model(small_config(false), Strategy::parse("covft")), ConfigError);
}

TEST_CASE("masks select the documented parameters") {
    for (const char* n : {"freeze", "full_ft", "bitfit", "lora", "vpt", "covft"}) {
        const Model m = make(n);
        const Strategy s = Strategy::parse(n);
        const auto pre = trainable_mask(m, s, Stage::pretrain);
        const auto ins = trainable_mask(m, s, Stage::instruct);
        for (const auto& name : pre) CHECK(name.starts_with("proj."));
        for (const auto& p : m.params) {
            const std::string& name = p.name;
            const bool in = ins.count(name) != 0;
            if (name.starts_with("text.")) CHECK_FALSE(in);
            if (name.starts_with("proj.") || name.starts_with("dec.")) CHECK(in);
            if (!name.starts_with("enc.")) continue;
            const std::string_view sn = n;
            if (sn == "freeze") CHECK_FALSE(in);
            if (sn == "full_ft") CHECK(in);
            if (sn == "bitfit") CHECK(in == name.ends_with(".bias"));
            if (sn == "lora") CHECK(in == (name.find(".lora_") != std::string::npos));
            if (sn == "vpt") CHECK(in == name.starts_with("enc.vpt."));
            if (sn == "covft") {
                const bool adapter = name.find(".moe.") != std::string::npos || name.find(".cve.") != std::string::npos;
                const bool norm = name.ends_with(".gamma") || name.ends_with(".beta");
                CHECK(in == (adapter || norm));
            }
        }
    }
}

TEST_CASE("trainable encoder fraction orders freeze < covft < full_ft") {
    auto enc_trainable = [](const std::string& n) {
        const Model m = make(n);
        const auto mask = trainable_mask(m, Strategy::parse(n), Stage::instruct);
        return m.params.numel([&](const Parameter& p) { return p.name.starts_with("enc.") && mask.count(p.name); });
    };
    CHECK(enc_trainable("freeze") == 0);
    CHECK(enc_trainable("covft") > 0);
    CHECK(enc_trainable("covft") < make("covft").params.numel([](const Parameter& p) { return p.name.starts_with("enc."); }));
    CHECK(enc_trainable("full_ft") > enc_trainable("bitfit"));
}

TEST_CASE("first AdamW step moves each weight by lr * (sign(g) + wd * w)") {
    ParameterStore ps;
    const ParamId id = ps.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
    ps[id].trainable = true;
    GradBuffer g(1);
    g.at(id, 3) = {0.3, -4.0, 0.0};
    AdamWState st;
    AdamWConfig h;
    h.weight_decay = 0.1;
    const double lr = 0.01;
    adamw_step(ps, g, st, h, lr);
    // w1 = w0 (1 - lr wd) - lr g / (|g| + eps')
    const double w0[3] = {1.0, -2.0, 0.5}, g0[3] = {0.3, -4.0, 0.0};
    for (std::size_t i = 0; i < 3; ++i) {
        const double dec = w0[i] * (1.0 - lr * h.weight_decay);
        const double upd = g0[i] == 0.0 ? 0.0 : lr * g0[i] / (std::abs(g0[i]) + h.eps);
        CHECK(ps[id].value.data[i] == doctest::Approx(dec - upd).epsilon(1e-14));
    }
}

TEST_CASE("zero gradient only decays, lr_scale scales, frozen params never move") {
    ParameterStore ps;
    const ParamId a = ps.add("a", Tensor({2}, {1.0, -1.0}));
    const ParamId b = ps.add("b", Tensor({2}, {1.0, -1.0}));
    const ParamId c = ps.add("c", Tensor({2}, {3.0, 4.0}));
    ps[a].trainable = ps[b].trainable = true;
    GradBuffer g(3);
    g.at(c, 2) = {1.0, 1.0};
    AdamWState st;
    AdamWConfig h;
    h.weight_decay = 0.5;
    const std::vector<double> scale{1.0, 0.1, 1.0};
    adamw_step(ps, g, st, h, 0.1, scale);
    CHECK(ps[a].value.data[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
    CHECK(ps[b].value.data[0] == doctest::Approx(1.0 - 0.01 * 0.5).epsilon(1e-15));
    CHECK(ps[c].value.data == std::vector<double>{3.0, 4.0});
    const std::vector<double> short_scale{1.0};
    CHECK_THROWS_AS(adamw_step(ps, g, st, h, 0.1, short_scale), ContractError);
    ps[c].trainable = true;
    g.at(c, 2)[0] = std::nan("");
    CHECK_THROWS_AS(adamw_step(ps, g, st, h, 0.1), NumericError);
}

TEST_CASE("learning-rate schedule") {
    CHECK(lr_at(0, 100, 1.0, 0.05) == doctest::Approx(0.2));
    CHECK(lr_at(4, 100, 1.0, 0.05) == doctest::Approx(1.0));
    CHECK(lr_at(5, 100, 1.0, 0.05) == doctest::Approx(1.0));
    CHECK(lr_at(5 + 95 / 2, 100, 1.0, 0.05) == doctest::Approx(0.5 * (1.0 + std::cos(M_PI * 47.0 / 95.0))));
    CHECK(lr_at(100, 100, 1.0, 0.05) == doctest::Approx(0.0));
    for (std::size_t s = 5; s < 99; ++s) CHECK(lr_at(s + 1, 100, 1.0, 0.05) <= lr_at(s, 100, 1.0, 0.05));
}

TEST_CASE("training is deterministic and respects the mask") {
    const Dataset pre = pretrain_pairs(16, 1), data = tiny_data(24, 2);
    TrainConfig tc;
    tc.strategy = Strategy::parse("covft");
    tc.pretrain_steps = 2;
    tc.instruct_steps = 4;
    tc.batch = 4;
    tc.lr_instruct = 1e-2;
    tc.checkpoint_every = 2;
    tc.snapshot_every = 2;
    tc.seed = 3;
    Model m1 = make("covft"), m2 = make("covft");
    const Model init = make("covft");
    const RunRecord r1 = train(m1, tc, pre, data), r2 = train(m2, tc, pre, data);
    REQUIRE_FALSE(r1.aborted);
    REQUIRE(r1.steps.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(r1.steps[i].loss == r2.steps[i].loss);
    CHECK(r1.steps[0].stage == Stage::pretrain);
    CHECK(r1.steps[5].stage == Stage::instruct);
    CHECK(r1.checkpoints.size() == 3);
    CHECK(r1.snapshots.size() == 2);
    CHECK(r1.steps[5].routing.size() == 1);
    const auto mask = trainable_mask(m1, tc.strategy, Stage::instruct);
    for (ParamId id = 0; id < m1.params.size(); ++id) {
        CHECK(m1.params[id].value.data == m2.params[id].value.data);
        if (!mask.count(m1.params[id].name) && !m1.params[id].name.starts_with("proj."))
            CHECK(m1.params[id].value.data == init.params[id].value.data);
    }
    std::ostringstream os;
    write_run_jsonl(r1, os);
    std::size_t lines = 0;
    for (char ch : os.str()) lines += ch == '\n';
    CHECK(lines == 6);
    CHECK(os.str().find("\"grad_snapshot_id\"") != std::string::npos);
}

TEST_CASE("a diverging run stops with a partial record") {
    TrainConfig tc;
    tc.strategy = Strategy::parse("full_ft");
    tc.instruct_steps = 30;
    tc.batch = 2;
    tc.lr_instruct = 1e6;
    Model m = make("full_ft");
    const RunRecord r = train(m, tc, {}, tiny_data(12, 4));
    CHECK(r.aborted);
    CHECK_FALSE(r.error.empty());
    CHECK(r.steps.size() < 30);
    Model m2 = make("freeze");
    tc.instruct_steps = 1;
    tc.lr_instruct = 1e-3;
    CHECK(train(m2, tc, {}, {}).aborted);
}
}
