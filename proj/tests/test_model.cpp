#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <vector>

#include "lab/checkpoint.hpp"
#include "lab/errors.hpp"
#include "lab/model.hpp"
#include "lab/optim.hpp"
#include "lab/rng.hpp"

using namespace lab;

namespace {

ModelConfig tiny_config(Objective obj = Objective::CE) {
    ModelConfig cfg;
    cfg.encoder.input_dim = 6;
    cfg.encoder.stage_widths = {5, 4};
    cfg.num_classes = 3;
    cfg.proj_hidden = 4;
    cfg.embed_dim = 3;
    cfg.queue_capacity = 8;
    cfg.objective = obj;
    return cfg;
}

Tensor random_batch(int rows, int cols, Rng& rng) {
    Tensor t({rows, cols});
    for (long i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(-1.0, 1.0);
    return t;
}

Tensor unit_rows(int rows, int cols, Rng& rng) {
    Tensor t = random_batch(rows, cols, rng);
    for (int r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (int c = 0; c < cols; ++c) sq += t.at(r, c) * t.at(r, c);
        const double n = std::sqrt(sq);
        for (int c = 0; c < cols; ++c) t.at(r, c) /= n;
    }
    return t;
}

double param_dist(const std::vector<TensorPtr>& a, const std::vector<TensorPtr>& b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (long j = 0; j < a[i]->size(); ++j) {
            const double d = a[i]->at(j) - b[i]->at(j);
            sq += d * d;
        }
    return std::sqrt(sq);
}

}  // namespace

TEST_CASE("forward_stages") {
    SUBCASE("zero parameters give zero activations") {
        EncoderParams p;
        p.w.push_back(param(Tensor({4, 6}), "w0"));
        p.b.push_back(param(Tensor({4}), "b0"));
        p.w.push_back(param(Tensor({2, 4}), "w1"));
        p.b.push_back(param(Tensor({2}), "b1"));
        Rng rng(1);
        auto x = constant(random_batch(3, 6, rng));
        auto acts = forward_stages(nullptr, x, p);
        REQUIRE(acts.size() == 2);
        CHECK(acts[0]->shape() == std::vector<int>{3, 4});
        CHECK(acts[1]->shape() == std::vector<int>{3, 2});
        for (const auto& a : acts)
            for (long i = 0; i < a->size(); ++i) CHECK(a->at(i) == 0.0);
    }
    SUBCASE("single identity stage is ReLU") {
        EncoderParams p;
        Tensor eye({4, 4});
        for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
        p.w.push_back(param(eye, "w0"));
        p.b.push_back(param(Tensor({4}), "b0"));
        auto x = constant(Tensor({2, 4}, {1, -2, 3, -4, -1, 2, -3, 4}));
        auto acts = forward_stages(nullptr, x, p);
        REQUIRE(acts.size() == 1);
        const std::vector<double> want = {1, 0, 3, 0, 0, 2, 0, 4};
        for (long i = 0; i < 8; ++i) CHECK(acts[0]->at(i) == want[static_cast<std::size_t>(i)]);
    }
    SUBCASE("two random stages match a hand-composed oracle") {
        Rng rng(2);
        ModelConfig cfg = tiny_config();
        ModelState m(cfg, rng);
        auto x = constant(random_batch(3, 6, rng));
        auto acts = m.forward_stages(nullptr, x);
        REQUIRE(acts.size() == 2);

        const auto& p = m.encoder_q();
        Tensor h1({3, 5});
        for (int i = 0; i < 3; ++i)
            for (int o = 0; o < 5; ++o) {
                double acc = p.b[0]->at(static_cast<long>(o));
                for (int d = 0; d < 6; ++d) acc += x->at(i, d) * p.w[0]->at(o, d);
                h1.at(i, o) = acc > 0 ? acc : 0;
            }
        Tensor h2({3, 4});
        for (int i = 0; i < 3; ++i)
            for (int o = 0; o < 4; ++o) {
                double acc = p.b[1]->at(static_cast<long>(o));
                for (int d = 0; d < 5; ++d) acc += h1.at(i, d) * p.w[1]->at(o, d);
                h2.at(i, o) = acc > 0 ? acc : 0;
            }
        for (long i = 0; i < 15; ++i) CHECK(std::abs(acts[0]->at(i) - h1.at(i)) < 1e-12);
        for (long i = 0; i < 12; ++i) CHECK(std::abs(acts[1]->at(i) - h2.at(i)) < 1e-12);
    }
    SUBCASE("width mismatch raises a dimension error") {
        Rng rng(3);
        ModelState m(tiny_config(), rng);
        auto bad = constant(random_batch(2, 7, rng));
        CHECK_THROWS_AS((void)m.forward_stages(nullptr, bad), DimensionError);
    }
}

TEST_CASE("momentum update") {
    Rng rng(4);
    ModelState m(tiny_config(Objective::SelfSupCon), rng);

    SUBCASE("closed forms") {
        auto pk = param(Tensor({1}, {1.0}), "k");
        auto pq = param(Tensor({1}, {0.0}), "q");
        momentum_update({pk}, {pq}, 0.99);
        CHECK(pk->at(0L) == doctest::Approx(0.99).epsilon(1e-15));

        pk->at(0L) = 1.0;
        momentum_update({pk}, {pq}, 0.0);
        CHECK(pk->at(0L) == 0.0);

        pk->at(0L) = 1.0;
        momentum_update({pk}, {pq}, 1.0);
        CHECK(pk->at(0L) == 1.0);

        CHECK_THROWS_AS(momentum_update({pk}, {pq}, -0.1), ContractError);
        CHECK_THROWS_AS(momentum_update({pk}, {pq}, 1.1), ContractError);
    }

    SUBCASE("EMA contraction with frozen query") {
        for (auto& p : m.ema_source_params())
            for (long j = 0; j < p->size(); ++j) p->at(j) += 0.3;
        double prev = param_dist(m.key_params(), m.ema_source_params());
        CHECK(prev > 0.0);
        for (int it = 0; it < 10; ++it) {
            m.momentum_update();
            const double d = param_dist(m.key_params(), m.ema_source_params());
            CHECK(d < prev);
            prev = d;
        }
    }

    SUBCASE("optimizer never touches the key side") {
        auto before = m.clone();
        auto params = m.trainable_params();
        for (auto& p : params) p->grad_buffer();
        OptimizerState opt(0.1, 0.9, 1e-4);
        for (int it = 0; it < 5; ++it) {
            for (auto& p : params) {
                for (auto& g : p->grad_buffer()) g = 0.01 * static_cast<double>(it + 1);
            }
            opt.sgd_step(params);
        }
        auto kb = before.key_params();
        auto ka = m.key_params();
        for (std::size_t i = 0; i < ka.size(); ++i)
            for (long j = 0; j < ka[i]->size(); ++j) CHECK(ka[i]->at(j) == kb[i]->at(j));
        // and the query side did move
        CHECK(param_dist(m.trainable_params(), before.trainable_params()) > 0.0);
    }
}

TEST_CASE("projection outputs are unit-norm") {
    Rng rng(5);
    ModelState m(tiny_config(Objective::SelfSupCon), rng);
    auto x = constant(random_batch(16, 6, rng));
    auto z = m.project(nullptr, m.features(nullptr, x));
    for (int r = 0; r < 16; ++r) {
        double sq = 0.0;
        for (int c = 0; c < z->cols(); ++c) sq += z->at(r, c) * z->at(r, c);
        CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-9);
    }
    Tensor zk = m.key_embed(random_batch(16, 6, rng));
    for (int r = 0; r < 16; ++r) {
        double sq = 0.0;
        for (int c = 0; c < zk.cols(); ++c) sq += zk.at(r, c) * zk.at(r, c);
        CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-9);
    }
}

TEST_CASE("key queue") {
    Rng rng(6);

    SUBCASE("seeded slots are unit-norm and unlabeled") {
        KeyQueue q(16, 5, true, rng);
        CHECK(q.filled() == 0);
        CHECK_FALSE(q.warmed_up());
        for (int i = 0; i < 16; ++i) {
            double sq = 0.0;
            for (int d = 0; d < 5; ++d) sq += q.raw_embeddings().at(i, d) * q.raw_embeddings().at(i, d);
            CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-9);
            CHECK(q.raw_labels()[static_cast<std::size_t>(i)] == -1);
        }
        CHECK_THROWS_AS((void)q.valid_embeddings(), ContractError);
    }

    SUBCASE("fifo eviction in age order") {
        KeyQueue q(4, 3, false, rng);
        Tensor ab({2, 3}, {1, 0, 0, 0, 1, 0});
        Tensor cd({2, 3}, {0, 0, 1, 1, 0, 0});
        Tensor ef({2, 3}, {0, 1, 0, 0, 0, 1});
        q.enqueue(ab, nullptr);
        CHECK(q.filled() == 2);
        q.enqueue(cd, nullptr);
        CHECK(q.warmed_up());
        q.enqueue(ef, nullptr);
        Tensor v = q.valid_embeddings();
        // contents are now {c,d,e,f} oldest first
        const std::vector<double> want = {0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1};
        REQUIRE(v.size() == 12);
        for (long i = 0; i < 12; ++i) CHECK(v.at(i) == want[static_cast<std::size_t>(i)]);
    }

    SUBCASE("contract violations") {
        KeyQueue q(4, 3, true, rng);
        Tensor notunit({1, 3}, {1, 1, 0});
        std::vector<int> l1 = {0};
        CHECK_THROWS_AS(q.enqueue(notunit, &l1), ContractError);
        Tensor five = unit_rows(5, 3, rng);
        std::vector<int> l5 = {0, 1, 2, 3, 4};
        CHECK_THROWS_AS(q.enqueue(five, &l5), ContractError);
        Tensor ok = unit_rows(2, 3, rng);
        CHECK_THROWS_AS(q.enqueue(ok, nullptr), ContractError);
        std::vector<int> wrong = {0};
        CHECK_THROWS_AS(q.enqueue(ok, &wrong), DimensionError);
    }

    SUBCASE("random sequences match a deque oracle") {
        const int M = 7, D = 4;
        KeyQueue q(M, D, true, rng);
        std::deque<std::pair<std::vector<double>, int>> oracle;
        int next_label = 0;
        for (int step = 0; step < 2000; ++step) {
            const int B = 1 + rng.uniform_int(M);
            Tensor keys = unit_rows(B, D, rng);
            std::vector<int> labels(static_cast<std::size_t>(B));
            for (auto& l : labels) l = next_label++;
            q.enqueue(keys, &labels);
            for (int b = 0; b < B; ++b) {
                std::vector<double> row(static_cast<std::size_t>(D));
                for (int d = 0; d < D; ++d) row[static_cast<std::size_t>(d)] = keys.at(b, d);
                oracle.emplace_back(std::move(row), labels[static_cast<std::size_t>(b)]);
                if (static_cast<int>(oracle.size()) > M) oracle.pop_front();
            }
            REQUIRE(q.filled() == static_cast<int>(oracle.size()));
            Tensor v = q.valid_embeddings();
            auto vl = q.valid_labels();
            for (int i = 0; i < q.filled(); ++i) {
                CHECK(vl[static_cast<std::size_t>(i)] == oracle[static_cast<std::size_t>(i)].second);
                for (int d = 0; d < D; ++d)
                    CHECK(v.at(i, d) == oracle[static_cast<std::size_t>(i)].first[static_cast<std::size_t>(d)]);
            }
        }
    }
}

TEST_CASE("checkpoint round trip") {
    const char* path = "ckpt_test_roundtrip.json";
    Rng rng(7);
    ModelConfig cfg = tiny_config(Objective::SupCon);
    ModelState m(cfg, rng);
    Tensor keys = unit_rows(3, 3, rng);
    std::vector<int> labels = {0, 1, 2};
    m.queue().enqueue(keys, &labels);

    CheckpointMeta meta;
    meta.epoch = 5;
    meta.rng_states["train"] = rng.state();
    save_checkpoint(m, meta, path);

    auto loaded = load_checkpoint(path);
    CHECK(loaded.meta.epoch == 5);
    CHECK(loaded.meta.rng_states.at("train") == rng.state());
    CHECK(loaded.state.config().objective == Objective::SupCon);
    CHECK(loaded.state.queue().filled() == 3);

    SUBCASE("identical logits on a probe batch") {
        Rng prng(8);
        Tensor probe = random_batch(4, 6, prng);
        auto a = m.classifier_logits(nullptr, m.features(nullptr, constant(probe)));
        auto b = loaded.state.classifier_logits(nullptr, loaded.state.features(nullptr, constant(probe)));
        for (long i = 0; i < a->size(); ++i) CHECK(a->at(i) == b->at(i));
        Tensor ka = m.key_embed(probe);
        Tensor kb = loaded.state.key_embed(probe);
        for (long i = 0; i < ka.size(); ++i) CHECK(ka.at(i) == kb.at(i));
    }

    SUBCASE("queue contents survive") {
        Tensor va = m.queue().valid_embeddings();
        Tensor vb = loaded.state.queue().valid_embeddings();
        for (long i = 0; i < va.size(); ++i) CHECK(va.at(i) == vb.at(i));
        CHECK(m.queue().valid_labels() == loaded.state.queue().valid_labels());
    }
    std::remove(path);
}

TEST_CASE("checkpoint load failure modes") {
    const char* path = "ckpt_test_bad.json";
    Rng rng(9);
    ModelState m(tiny_config(), rng);
    CheckpointMeta meta;
    save_checkpoint(m, meta, path);

    auto rewrite = [&](auto mutate) {
        std::ifstream in(path);
        nlohmann::json doc = nlohmann::json::parse(in);
        in.close();
        mutate(doc);
        std::ofstream out(path);
        out << doc.dump();
    };

    SUBCASE("missing file") {
        CHECK_THROWS_AS((void)load_checkpoint("no_such_file.json"), LoadError);
    }
    SUBCASE("version mismatch") {
        rewrite([](nlohmann::json& d) { d["schema_version"] = 99; });
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("schema version"),
                             LoadError);
    }
    SUBCASE("tampered shape header") {
        rewrite([](nlohmann::json& d) { d["params"]["cls.w"]["shape"] = {7, 7}; });
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("shape mismatch"),
                             LoadError);
    }
    SUBCASE("truncated file") {
        std::ifstream in(path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(path);
        out << text.substr(0, text.size() / 2);
        out.close();
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("truncated"),
                             LoadError);
    }
    SUBCASE("missing parameter") {
        rewrite([](nlohmann::json& d) { d["params"].erase("enc.0.w"); });
        CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("missing parameter"),
                             LoadError);
    }
    std::remove(path);
}

TEST_CASE("checkpoint resume replays the training trajectory") {
    // Three manual CE steps, checkpoint (params + velocities + rng), two more
    // steps; reloading and redoing those two steps must land on bit-identical
    // parameters.
    auto step = [](ModelState& m, OptimizerState& opt, Rng& rng) {
        Tensor x = random_batch(4, 6, rng);
        std::vector<int> y = {rng.uniform_int(3), rng.uniform_int(3), rng.uniform_int(3),
                              rng.uniform_int(3)};
        auto params = m.trainable_params();
        for (auto& p : params) {
            p->grad_buffer();
            p->zero_grad();
        }
        Tape tape;
        auto loss = ops::softmax_cross_entropy(
            &tape, m.classifier_logits(&tape, m.features(&tape, constant(x))), y);
        tape.backward(loss);
        opt.sgd_step(params);
        m.momentum_update();
    };

    const char* path = "ckpt_test_resume.json";
    Rng rng(11);
    ModelState m(tiny_config(), rng);
    OptimizerState opt(0.05, 0.9, 1e-4);
    Rng train_rng = rng.fork(100);
    for (int i = 0; i < 3; ++i) step(m, opt, train_rng);

    CheckpointMeta meta;
    meta.epoch = 3;
    meta.rng_states["train"] = train_rng.state();
    {
        auto params = m.trainable_params();
        const auto& vels = opt.velocities();
        REQUIRE(vels.size() == params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
            meta.velocities.emplace(params[i]->name, vels[i]);
    }
    save_checkpoint(m, meta, path);

    for (int i = 0; i < 2; ++i) step(m, opt, train_rng);

    auto loaded = load_checkpoint(path);
    CHECK(loaded.meta.epoch == 3);
    OptimizerState opt_b(0.05, 0.9, 1e-4);
    {
        std::vector<Tensor> vels;
        for (const auto& p : loaded.state.trainable_params())
            vels.push_back(loaded.meta.velocities.at(p->name));
        opt_b.set_velocities(std::move(vels));
    }
    Rng resumed = Rng::from_state(loaded.meta.rng_states.at("train"));
    for (int i = 0; i < 2; ++i) step(loaded.state, opt_b, resumed);

    auto pa = m.all_query_params();
    auto pb = loaded.state.all_query_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (long j = 0; j < pa[i]->size(); ++j) CHECK(pa[i]->at(j) == pb[i]->at(j));
    std::remove(path);
}
