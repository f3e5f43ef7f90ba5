#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "conmat/ops.hpp"

using namespace conmat;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0f);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(Container, RoundTripBothWidths) {
  Tensor<double> t({2, 1, 3}, std::vector<double>{1, -2, 3.5, 4, 5, 1e-300});
  std::stringstream ss;
  io::write_tensor(ss, t);
  const auto bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "CMFT");
  // magic + version + rank + 3 dims + width + data
  EXPECT_EQ(bytes.size(), 4u + 2 + 2 + 3 * 8 + 1 + 6 * 8);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4 + 2 + 2 + 24]), 8u);
  EXPECT_EQ(io::read_tensor<double>(ss), t);

  std::stringstream s32;
  io::write_tensor(s32, t.cast<float>());
  auto back = io::read_tensor<double>(s32);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(back[2], 3.5);
}

TEST(Container, RejectsCorruptInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(io::read_tensor<float>(bad), IoError);
  Tensor<float> t({4}, 1.0f);
  std::stringstream ss;
  io::write_tensor(ss, t);
  auto s = ss.str();
  std::stringstream cut(s.substr(0, s.size() - 3));
  EXPECT_THROW(io::read_tensor<float>(cut), IoError);
}

TEST(Container, ArchiveKeepsHeaderAndOrder) {
  io::Archive<float> a;
  a.header = "input_size = 32\n";
  a.entries.emplace_back("b.weight", Tensor<float>({2}, std::vector<float>{1, 2}));
  a.entries.emplace_back("a.bias", Tensor<float>({1}, std::vector<float>{3}));
  std::stringstream ss;
  io::write_archive(ss, a);
  auto r = io::read_archive<float>(ss);
  EXPECT_EQ(r.header, a.header);
  ASSERT_EQ(r.entries.size(), 2u);
  EXPECT_EQ(r.entries[0].first, "b.weight");
  EXPECT_EQ(*r.find("a.bias"), a.entries[1].second);
  EXPECT_EQ(r.find("missing"), nullptr);
}

TEST(Rng, SeedDeterminesStream) {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_NE(Rng(7).next(), c.next());
  auto d1 = Rng::derive(1, 5), d2 = Rng::derive(1, 5), d3 = Rng::derive(1, 6);
  EXPECT_EQ(d1.uniform(), d2.uniform());
  EXPECT_NE(Rng::derive(1, 5).uniform(), d3.uniform());
}

TEST(Rng, TruncatedNormalStaysInsideTwoSigma) {
  Rng r(3);
  double sum = 0;
  for (int i = 0; i < 20000; ++i) {
    double v = r.truncated_normal(0.02);
    ASSERT_LE(std::abs(v), 0.04);
    sum += v;
  }
  EXPECT_NEAR(sum / 20000, 0.0, 1e-3);
}

TEST(Tape, SumGivesOnes) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, std::vector<double>{1, -2, 5}));
  tape.backward(sum(x));
  auto g = tape.grad(x);
  for (auto v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Tape, SumOfSquares) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, std::vector<double>{1, 2}));
  tape.backward(sum(mul(x, x)));
  auto g = tape.grad(x);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], 4.0);
}

TEST(Tape, RejectsNonScalarAndRepeatedBackward) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0));
  auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
  auto l = sum(y);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), ValueError);
}

TEST(Tape, EachNodeVisitedOnce) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0));
  auto y = add(x, x);
  auto z = mul(y, y);
  auto l = sum(z);
  tape.backward(l);
  EXPECT_EQ(tape.visits(), tape.size());
  EXPECT_EQ(tape.grad(x)[0], 8.0);  // d/dx (2x)^2 = 8x
}

TEST(Tape, NonFiniteOutputIsAnError) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1}, std::numeric_limits<double>::max()));
  EXPECT_THROW(scale(x, 10.0), NumericError);
}

TEST(Tape, ParameterGradientAccumulates) {
  Parameter<double> p(Tensor<double>({2}, std::vector<double>{3, 4}));
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(sum(mul(tape.param(p), tape.param(p))));
  }
  EXPECT_EQ(p.grad[0], 12.0);
  EXPECT_EQ(p.grad[1], 16.0);
  p.zero_grad();
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(GradCheck, SumIsExact) {
  // Dyadic inputs and a power-of-two step keep every difference exact.
  Rng r(1);
  Tensor<double> x({5});
  for (auto& v : x.data()) v = static_cast<double>(r.index(64)) / 8.0 - 4.0;
  EXPECT_EQ(grad_check([](Tape<double>&, Var<double> v) { return sum(v); }, x, 0x1p-17), 0.0);
}

TEST(GradCheck, SoftmaxThenIndex) {
  Rng r(2);
  Tensor<double> x({6});
  for (auto& v : x.data()) v = r.normal();
  double err = grad_check([](Tape<double>&, Var<double> v) { return select(softmax(v, 0), 2); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, FlagsWrongAdjoint) {
  // y = sum(x) with the adjoint doubled: |2 - 1| / (2 + 1) = 1/3.
  auto bad_sum = [](Tape<double>& t, Var<double> x) {
    double s = 0;
    for (auto v : x.value().data()) s += v;
    const auto xi = x.id;
    return t.record(
        Tensor<double>::scalar(s), {x},
        [xi](Tape<double>& tp, std::size_t self) {
          auto gx = tp.grad_buffer(xi);
          for (auto& g : gx) g += 2.0 * tp.out_grad(self)[0];
        },
        "bad_sum");
  };
  Tensor<double> x({3}, std::vector<double>{0.1, 0.2, 0.3});
  EXPECT_NEAR(grad_check(bad_sum, x), 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, RequiresPositiveStep) {
  Tensor<double> x({1}, 1.0);
  EXPECT_THROW(grad_check([](Tape<double>&, Var<double> v) { return sum(v); }, x, 0.0), ValueError);
  EXPECT_THROW(grad_check([](Tape<double>&, Var<double> v) { return v; }, Tensor<double>({2}, 1.0)), ShapeError);
}
