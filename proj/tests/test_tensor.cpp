#include "effcnet/rng.hpp"
#include "effcnet/tensor.hpp"

#include <doctest.h>

#include <cmath>

using namespace effcnet;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        x = lo + (hi - lo) * rng.uniform();
    }
    return Tensor<double>(std::move(shape), std::move(v));
}

} // namespace

TEST_CASE("tensor construction")
{
    SUBCASE("zero fill is canonical row-major")
    {
        Tensor<float> t({2, 3}, 0.0f);
        CHECK(t.numel() == 6);
        CHECK(t.strides() == Strides{3, 1});
        for (float v : t.values()) {
            CHECK(v == 0.0f);
        }
        CHECK_FALSE(t.requires_grad());
    }
    SUBCASE("single element")
    {
        Tensor<double> t({1}, 7.5);
        CHECK(t.item() == 7.5);
    }
    SUBCASE("buffer indexing")
    {
        Tensor<double> t({2, 2}, std::vector<double>{1, 2, 3, 4});
        // offset = r*2 + c
        CHECK(t.at({1, 0}) == 3.0);
        CHECK(t.at({0, 1}) == 2.0);
    }
    SUBCASE("errors")
    {
        CHECK_THROWS_AS(Tensor<double>({2, 0}, 0.0), ShapeError);
        CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    }
}

TEST_CASE("strided views")
{
    Tensor<double> m({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor<double> t = m.transpose(0, 1);
    CHECK_FALSE(t.is_contiguous());
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at({2, 1}) == 6.0);
    CHECK(t.contiguous().to_vector() == std::vector<double>{1, 4, 2, 5, 3, 6});
    CHECK_THROWS_AS(t.values(), ShapeError);
    CHECK(m.reshape({3, 2}).at({2, 0}) == 5.0);
    CHECK_THROWS_AS(m.reshape({4, 2}), ShapeError);
}

TEST_CASE("elementwise arithmetic")
{
    Tensor<double> a({2}, std::vector<double>{1, 2});
    Tensor<double> b({2}, std::vector<double>{3, 4});
    CHECK(add(a, b).to_vector() == std::vector<double>{4, 6});
    CHECK(sub(a, b).to_vector() == std::vector<double>{-2, -2});

    Rng rng(3);
    Tensor<float> x({3, 4}, 0.0f);
    {
        std::vector<float> v(12);
        for (float& f : v) {
            f = static_cast<float>(rng.normal());
        }
        x = Tensor<float>({3, 4}, v);
    }
    CHECK(mul(x, Tensor<float>::scalar(1.0f)).to_vector() == x.to_vector());
    CHECK(mul(Tensor<float>::scalar(1.0f), x).to_vector() == x.to_vector());

    CHECK_THROWS_AS(add(Tensor<double>({2}, 1.0), Tensor<double>({3}, 1.0)), ShapeError);
}

TEST_CASE("add and mul are commutative and associative on integer data")
{
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> va(8), vb(8), vc(8);
        for (std::size_t i = 0; i < 8; ++i) {
            va[i] = static_cast<double>(static_cast<int>(rng.uniform_int(21)) - 10);
            vb[i] = static_cast<double>(static_cast<int>(rng.uniform_int(21)) - 10);
            vc[i] = static_cast<double>(static_cast<int>(rng.uniform_int(21)) - 10);
        }
        Tensor<double> a({8}, va), b({8}, vb), c({8}, vc);
        CHECK(add(a, b).to_vector() == add(b, a).to_vector());
        CHECK(mul(a, b).to_vector() == mul(b, a).to_vector());
        CHECK(add(add(a, b), c).to_vector() == add(a, add(b, c)).to_vector());
        CHECK(mul(mul(a, b), c).to_vector() == mul(a, mul(b, c)).to_vector());
    }
}

TEST_CASE("matmul")
{
    SUBCASE("identity")
    {
        Tensor<double> eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
        Rng rng(5);
        auto m = random_tensor({3, 4}, rng);
        CHECK(matmul(eye, m).to_vector() == m.to_vector());
    }
    SUBCASE("hand arithmetic")
    {
        Tensor<double> a({2, 2}, std::vector<double>{1, 2, 3, 4});
        Tensor<double> b({2, 1}, std::vector<double>{1, 1});
        auto c = matmul(a, b);
        CHECK(c.shape() == Shape{2, 1});
        CHECK(c.to_vector() == std::vector<double>{3, 7});
    }
    SUBCASE("inner dimension mismatch")
    {
        CHECK_THROWS_AS(matmul(Tensor<double>({2, 3}, 1.0), Tensor<double>({2, 3}, 1.0)), ShapeError);
    }
    SUBCASE("transposed operand")
    {
        Tensor<double> a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        auto c = matmul(a, a.transpose(0, 1));
        CHECK(c.to_vector() == std::vector<double>{14, 32, 32, 77});
    }
}

TEST_CASE("backward")
{
    SUBCASE("sum gives ones")
    {
        Tensor<double> x({4}, std::vector<double>{1, -2, 3, 0.5});
        x.set_requires_grad(true);
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        auto loss = sum(x);
        auto g = tape.backward(loss);
        CHECK(g.at(x).to_vector() == std::vector<double>(4, 1.0));
    }
    SUBCASE("sum of squares gives 2x")
    {
        Tensor<double> x({2}, std::vector<double>{1, 2});
        x.set_requires_grad(true);
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        auto g = tape.backward(sum(mul(x, x)));
        CHECK(g.at(x).to_vector() == std::vector<double>{2, 4});
    }
    SUBCASE("fan-out accumulates")
    {
        Tensor<double> x({3}, std::vector<double>{1, 2, 3});
        x.set_requires_grad(true);
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        auto g = tape.backward(sum(add(x, x)));
        CHECK(g.at(x).to_vector() == std::vector<double>(3, 2.0));
    }
    SUBCASE("leaves without requires_grad are absent")
    {
        Tensor<double> x({2}, 1.0);
        Tensor<double> w({2}, 3.0);
        x.set_requires_grad(true);
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        auto g = tape.backward(sum(mul(x, w)));
        CHECK(g.contains(x));
        CHECK_FALSE(g.contains(w));
        CHECK(g.size() == 1);
    }
    SUBCASE("gradient flows through views")
    {
        Tensor<double> a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
        a.set_requires_grad(true);
        Tensor<double> w({2, 3}, std::vector<double>{1, 0, 2, 0, 3, 0});
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        // sum(a^T ⊙ w^T) == sum(a ⊙ w), so the gradient is w.
        auto loss = sum(mul(a.transpose(0, 1), w.transpose(0, 1)));
        CHECK(tape.backward(loss).at(a).to_vector() == w.to_vector());
    }
    SUBCASE("errors")
    {
        Tensor<double> x({3}, 1.0);
        x.set_requires_grad(true);
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        auto y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ShapeError);
        Tensor<double> stray({1}, 2.0);
        CHECK_THROWS_AS(tape.backward(stray), TapeError);
    }
    SUBCASE("tape is single-use")
    {
        Tensor<double> x({3}, 1.0);
        x.set_requires_grad(true);
        Tape<double> tape;
        RecordingScope<double> scope(tape);
        auto loss = sum(x);
        tape.backward(loss);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(loss), TapeError);
        CHECK_THROWS_AS(sum(x), TapeError);
    }
    SUBCASE("no recording outside a scope")
    {
        Tensor<double> x({3}, 1.0);
        x.set_requires_grad(true);
        auto y = sum(x);
        CHECK_FALSE(y.requires_grad());
    }
}

TEST_CASE("grad_check")
{
    Rng rng(7);
    auto x = random_tensor({5}, rng);
    SUBCASE("linear function")
    {
        CHECK(grad_check([](const Tensor<double>& t) { return sum(t); }, x) < 1e-9);
    }
    SUBCASE("product")
    {
        auto b = random_tensor({5}, rng);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(t, b)); }, x) < 1e-6);
    }
    SUBCASE("matmul wrt both operands")
    {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        const Tensor<double> ins[] = {a, b};
        double err = grad_check_many(
            [](std::span<const Tensor<double>> t) {
                auto c = matmul(t[0], t[1]);
                return sum(mul(c, c));
            },
            ins);
        CHECK(err < 1e-6);
    }
    SUBCASE("five-point stencil is exact on a quartic")
    {
        auto quartic = [](const Tensor<double>& t) { return sum(mul(mul(t, t), mul(t, t))); };
        CHECK(grad_check(quartic, x, 0.1, 4) < 1e-9);
        CHECK(grad_check(quartic, x, 0.1, 2) > 1e-4);
        CHECK_THROWS_AS(grad_check(quartic, x, 0.1, 3), ConfigError);
    }
    SUBCASE("non-finite function value")
    {
        CHECK_THROWS_AS(grad_check(
                            [](const Tensor<double>& t) {
                                return mul(sum(t), Tensor<double>::scalar(std::numeric_limits<double>::infinity()));
                            },
                            x),
                        NumericsError);
    }
}
