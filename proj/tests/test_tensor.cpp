#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "darts/ops.hpp"
#include "darts/tensor.hpp"

using namespace darts;

TEST_CASE("shape and data length stay consistent") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK(t.shape() == Shape{2, 3});
    CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1.0, 2.0}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{0, 3}), ShapeError);
}

TEST_CASE("grad allocates lazily with matching shape") {
    Tensor t({4}, 0.0, true);
    CHECK(!t.has_grad());
    t.grad()[1] = 2.0;
    CHECK(t.has_grad());
    CHECK(t.grad().size() == t.numel());
    t.zero_grad();
    for (double g : t.grad()) CHECK(g == 0.0);
}

TEST_CASE("loss = sum(x) gives all-ones gradient") {
    Tensor x = Tensor::from_data({3}, {1.0, -2.0, 5.0}, true);
    Tape tape;
    Tensor loss = sum_all(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK(loss.grad()[0] == 1.0);  // d(loss)/d(loss)
}

TEST_CASE("loss = x*x at x=3 gives gradient 6") {
    Tensor x = Tensor::scalar(3.0, true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("gradient accumulation is additive; reset is exact zero") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    const std::vector<double> once = x.grad();
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
    x.zero_grad();
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), NumericError);

    Tensor z = Tensor::scalar(1.0);  // requires_grad false
    CHECK_THROWS_AS(backward(z), NumericError);
}

TEST_CASE("no-grad guard suspends recording") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    {
        NoGradGuard guard;
        Tensor y = mul(x, x);
        CHECK(!y.requires_grad());
    }
    CHECK(tape.size() == 0);
}

TEST_CASE("tape replay in reverse order handles shared subexpressions") {
    // y = x*x used twice; gradient of sum(y + y) is 4x.
    Tensor x = Tensor::from_data({2}, {1.5, -0.5}, true);
    Tape tape;
    Tensor y = mul(x, x);
    Tensor loss = sum_all(add(y, y));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0 * 1.5).epsilon(1e-15));
    CHECK(x.grad()[1] == doctest::Approx(4.0 * -0.5).epsilon(1e-15));
}

TEST_CASE("forward is bitwise deterministic for fixed inputs") {
    Rng rng(99);
    Tensor x = Tensor::uniform({2, 3, 4, 5}, rng, -1.0, 1.0, true);
    Rng rng2(77);
    Tensor k = Tensor::uniform({3, 3, 3, 3}, rng2, -0.5, 0.5, true);
    Tensor b({3}, 0.1, true);
    Tensor y1 = conv2d(x, k, b, 1, 1);
    Tensor y2 = conv2d(x, k, b, 1, 1);
    for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("clone copies data but not identity") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor c = x.clone();
    CHECK(!c.same_storage(x));
    c[0] = 9.0;
    CHECK(x[0] == 1.0);
}
