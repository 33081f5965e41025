#include <catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "mtfl/checks.hpp"
#include "mtfl/nn.hpp"

using namespace mtfl;
using testutil::scalar_batch;
using testutil::scalar_model;

TEST_CASE("poly_lr endpoints, frozen midpoint, monotonicity") {
    CHECK(poly_lr(0, 100, 0.1) == 0.1);
    CHECK(poly_lr(100, 100, 0.1) == 0.0);
    // 0.1 * 0.5^0.9, evaluated independently and frozen.
    CHECK(poly_lr(50, 100, 0.1) == Catch::Approx(0.05358867312681466).epsilon(1e-14));
    for (int r = 0; r < 100; ++r) CHECK(poly_lr(r + 1, 100, 0.1) < poly_lr(r, 100, 0.1));
    CHECK_THROWS(poly_lr(101, 100, 0.1));
    CHECK_THROWS(poly_lr(-1, 100, 0.1));
}

TEST_CASE("forward_loss hand cases") {
    SECTION("zero-weight model, zero target") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 0.0}});
        CHECK(forward_loss(m, 0, b) == 0.0);
    }
    SECTION("quadratic (theta - 1)^2 at theta = 0") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        CHECK(forward_loss(m, 0, b) == 1.0);
    }
    SECTION("bit-identical on repeat") {
        RngStream init(7);
        MultiTaskModel m = make_multitask_model({4, {8, 8}}, {{0, 2, LossKind::squared_error}}, init);
        Batch b;
        b.size = 3;
        b.feat_dim = 4;
        RngStream rng(9);
        b.features.resize(12);
        for (double& v : b.features) v = rng.normal();
        b.targets[0].resize(6);
        for (double& v : b.targets[0]) v = rng.normal();
        const double l1 = forward_loss(m, 0, b);
        const double l2 = forward_loss(m, 0, b);
        CHECK(l1 == l2);
    }
    SECTION("errors") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        CHECK_THROWS(forward_loss(m, 3, b));  // unknown activity
        Batch wide = b;
        wide.feat_dim = 2;
        wide.features = {1.0, 1.0};
        CHECK_THROWS(forward_loss(m, 0, wide));  // shape mismatch
    }
}

TEST_CASE("backward hand cases and stale cache") {
    SECTION("d/dtheta (theta - 1)^2 at 0 is -2") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        ForwardCache c;
        forward_loss(m, 0, b, &c);
        backward(m, c);
        CHECK(m.trunk[0].W.grad[0] == -2.0);
    }
    SECTION("zero residual gives zero gradient") {
        MultiTaskModel m = scalar_model(1.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        ForwardCache c;
        forward_loss(m, 0, b, &c);
        backward(m, c);
        CHECK(m.trunk[0].W.grad[0] == 0.0);
        CHECK(m.heads[0].layers[0].W.grad[0] == 0.0);
    }
    SECTION("stale cache detected") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        ForwardCache c;
        forward_loss(m, 0, b, &c);
        GradMask mask;
        mask.trunk = true;
        mask.heads = {0};
        HyperParams hp;
        hp.weight_decay = 0.0;
        hp.momentum = 0.0;
        sgd_step(m, mask, 0.1, hp);
        CHECK_THROWS(backward(m, c));
    }
}

TEST_CASE("gradients match central finite differences") {
    double worst = 0.0;
    for (int t = 0; t < 25; ++t)
        worst = std::max(worst, gradient_oracle_trial(derive_seed(42, {(std::uint64_t)t})).max_rel_err);
    CHECK(worst < 1e-4);
}

TEST_CASE("sgd_step semantics") {
    HyperParams plain;
    plain.momentum = 0.0;
    plain.weight_decay = 0.0;

    SECTION("lr = 0 leaves parameters unchanged") {
        MultiTaskModel m = scalar_model(0.3, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        ForwardCache c;
        forward_loss(m, 0, b, &c);
        const GradMask mask = backward(m, c);
        sgd_step(m, mask, 0.0, plain);
        CHECK(testutil::theta_of(m) == 0.3);
    }
    SECTION("hand step: w=0, g=-2, lr=0.25 -> w=0.5") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        ForwardCache c;
        forward_loss(m, 0, b, &c);
        const GradMask mask = backward(m, c);
        sgd_step(m, mask, 0.25, plain);
        CHECK(testutil::theta_of(m) == 0.5);
    }
    SECTION("momentum recurrence: second displacement is 1.9x the first") {
        HyperParams mom;
        mom.momentum = 0.9;
        mom.weight_decay = 0.0;
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        GradMask mask;
        mask.trunk = true;
        m.trunk[0].W.grad[0] = -2.0;  // constant gradient injected directly
        sgd_step(m, mask, 0.1, mom);
        const double d1 = testutil::theta_of(m);
        m.trunk[0].W.grad[0] = -2.0;
        sgd_step(m, mask, 0.1, mom);
        const double d2 = testutil::theta_of(m) - d1;
        CHECK(d2 == Catch::Approx(1.9 * d1).epsilon(1e-15));
    }
    SECTION("only masked blocks move") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}, {1, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}, {1, 1.0}});
        ForwardCache c;
        forward_loss(m, 0, b, &c);
        const GradMask mask = backward(m, c);
        m.head(1).layers[0].W.grad[0] = 123.0;  // garbage outside the mask
        sgd_step(m, mask, 0.25, plain);
        CHECK(m.head(1).layers[0].W.values[0] == 1.0);
    }
    SECTION("non-finite parameters rejected") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        GradMask mask;
        mask.trunk = true;
        m.trunk[0].W.grad[0] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS(sgd_step(m, mask, 0.1, plain));
    }
}

TEST_CASE("lookahead_shared") {
    SECTION("zero gradient keeps the trunk") {
        MultiTaskModel m = scalar_model(1.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        const TrunkSnapshot s = lookahead_shared(m, 0, b, 0.25);
        CHECK(s.weights[0][0] == 1.0);
    }
    SECTION("hand step: theta 0 -> 0.5 at lr 0.25") {
        MultiTaskModel m = scalar_model(0.0, {{0, 1.0}});
        const Batch b = scalar_batch({{0, 1.0}});
        const TrunkSnapshot s = lookahead_shared(m, 0, b, 0.25);
        CHECK(s.weights[0][0] == 0.5);
    }
    SECTION("persistent model untouched, bit for bit") {
        RngStream init(3);
        MultiTaskModel m = make_multitask_model({4, {6}}, {{0, 2, LossKind::squared_error}}, init);
        Batch b;
        b.size = 2;
        b.feat_dim = 4;
        RngStream rng(4);
        b.features.resize(8);
        for (double& v : b.features) v = rng.normal();
        b.targets[0].resize(4);
        for (double& v : b.targets[0]) v = rng.normal();
        const std::uint64_t before = m.state_hash();
        const double loss_before = forward_loss(m, 0, b);
        lookahead_shared(m, 0, b, 0.1);
        CHECK(m.state_hash() == before);
        CHECK(forward_loss(m, 0, b) == loss_before);
    }
}

TEST_CASE("model construction") {
    SECTION("same stream seed gives bit-identical models") {
        const ModelArch arch{6, {12, 12}};
        const std::vector<HeadSpec> heads{{0, 2, LossKind::squared_error},
                                          {1, 2, LossKind::squared_error}};
        MultiTaskModel a = make_multitask_model(arch, heads, RngStream(11));
        MultiTaskModel b = make_multitask_model(arch, heads, RngStream(11));
        CHECK(a.state_hash() == b.state_hash());
    }
    SECTION("weights stay inside the init bound") {
        MultiTaskModel m = make_multitask_model({6, {12}}, {{0, 2, LossKind::squared_error}},
                                                RngStream(5));
        const double bound = std::sqrt(6.0 / (6 + 12));
        for (double w : m.trunk[0].W.values) {
            CHECK(w <= bound);
            CHECK(w >= -bound);
        }
    }
    SECTION("duplicate activity ids rejected") {
        CHECK_THROWS(make_multitask_model({4, {8}},
                                          {{0, 2, LossKind::squared_error},
                                           {0, 2, LossKind::squared_error}},
                                          RngStream(1)));
    }
}

TEST_CASE("joint_backward equals single-activity backward for one head") {
    RngStream init(21);
    MultiTaskModel m = make_multitask_model({5, {9}}, {{0, 3, LossKind::squared_error}}, init);
    Batch b;
    b.size = 4;
    b.feat_dim = 5;
    RngStream rng(22);
    b.features.resize(20);
    for (double& v : b.features) v = rng.normal();
    b.targets[0].resize(12);
    for (double& v : b.targets[0]) v = rng.normal();

    MultiTaskModel single = m;
    ForwardCache c;
    forward_loss(single, 0, b, &c);
    backward(single, c);

    GradMask mask;
    joint_backward(m, b, mask);
    CHECK(m.state_hash() == single.state_hash());
}
