#include <gtest/gtest.h>

#include <cmath>

#include "bmnn/linalg.hpp"
#include "bmnn/rng.hpp"
#include "bmnn/tensor.hpp"

using bmnn::Tensor;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, bmnn::RngStream& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

double ls_objective(const Tensor& a, const Tensor& b, const Tensor& x, double ridge) {
    Tensor r = matmul(a, x);
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double d = r[i] - b[i];
        s += d * d;
    }
    for (std::size_t i = 0; i < x.size(); ++i) s += ridge * x[i] * x[i];
    return s;
}

} // namespace

TEST(Tensor, ShapeDataConsistency) {
    EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), bmnn::ShapeError);
    EXPECT_THROW(Tensor({2, 0}), bmnn::ShapeError);
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_TRUE(t.all_finite());
}

TEST(Matmul, IdentityTimesVector) {
    Tensor v({2, 1}, {3.0, 4.0});
    Tensor out = matmul(bmnn::identity(2), v);
    EXPECT_EQ(out[0], 3.0);
    EXPECT_EQ(out[1], 4.0);
}

TEST(Matmul, HandEvaluatedProduct) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {5, 6});
    Tensor out = matmul(a, b);
    EXPECT_EQ(out[0], 17.0);
    EXPECT_EQ(out[1], 39.0);
}

TEST(Matmul, DimensionMismatch) {
    Tensor a({2, 3});
    Tensor b({4, 1});
    EXPECT_THROW(matmul(a, b), bmnn::ShapeError);
}

TEST(Matmul, IdentityIsExactBothSides) {
    bmnn::RngStream rng(7, "matmul-identity");
    Tensor a = random_tensor({5, 5}, rng);
    Tensor left = matmul(bmnn::identity(5), a);
    Tensor right = matmul(a, bmnn::identity(5));
    EXPECT_EQ(bmnn::max_abs_difference(left, a), 0.0);
    EXPECT_EQ(bmnn::max_abs_difference(right, a), 0.0);
}

TEST(LeastSquares, IdentityDesign) {
    bmnn::RngStream rng(11, "ls-identity");
    Tensor b = random_tensor({3, 2}, rng);
    Tensor x = bmnn::solve_least_squares(bmnn::identity(3), b, 0.0);
    EXPECT_LT(bmnn::max_abs_difference(x, b), 1e-14);
}

TEST(LeastSquares, MeanMinimizer) {
    // min_x (x-1)^2 + (x-3)^2 has the mean as its unique minimizer; confirm
    // against a 1-d brute-force scan.
    Tensor a({2, 1}, {1.0, 1.0});
    Tensor b({2, 1}, {1.0, 3.0});
    Tensor x = bmnn::solve_least_squares(a, b, 0.0);
    EXPECT_NEAR(x[0], 2.0, 1e-14);

    double best = 1e300, best_x = 0.0;
    for (double cand = -10.0; cand <= 10.0; cand += 0.01) {
        Tensor xc({1, 1}, {cand});
        const double f = ls_objective(a, b, xc, 0.0);
        if (f < best) {
            best = f;
            best_x = cand;
        }
    }
    EXPECT_NEAR(best_x, 2.0, 0.01);
}

TEST(LeastSquares, RankZeroSystemIsSingular) {
    Tensor a({3, 2});
    Tensor b({3, 1}, {1, 2, 3});
    EXPECT_THROW(bmnn::solve_least_squares(a, b, 0.0), bmnn::SingularSystemError);
}

TEST(LeastSquares, RidgeRescuesRankZero) {
    Tensor a({3, 2});
    Tensor b({3, 1}, {1, 2, 3});
    Tensor x = bmnn::solve_least_squares(a, b, 0.5);
    EXPECT_NEAR(x[0], 0.0, 1e-14);
    EXPECT_NEAR(x[1], 0.0, 1e-14);
}

TEST(LeastSquares, PerturbationNeverImproves) {
    bmnn::RngStream rng(23, "ls-perturb");
    Tensor a = random_tensor({8, 3}, rng);
    Tensor b = random_tensor({8, 2}, rng);
    Tensor x = bmnn::solve_least_squares(a, b, 0.0);
    const double base = ls_objective(a, b, x, 0.0);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor xp = x;
        for (std::size_t i = 0; i < xp.size(); ++i) xp[i] += 1e-3 * rng.normal();
        EXPECT_GE(ls_objective(a, b, xp, 0.0), base - 1e-10);
    }
}

TEST(SolveLinear, MatchesHandInverse) {
    Tensor a({2, 2}, {2, 0, 0, 4});
    Tensor b({2, 1}, {2, 8});
    Tensor x = bmnn::solve_linear(a, b);
    EXPECT_NEAR(x[0], 1.0, 1e-15);
    EXPECT_NEAR(x[1], 2.0, 1e-15);
}

TEST(Im2col, PointwiseKernelIsReshape) {
    bmnn::RngStream rng(3, "im2col-1x1");
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor cols = bmnn::im2col(x, 1, 1, 1, 0);
    Tensor expected = x.reshaped({2, 12});
    EXPECT_EQ(bmnn::max_abs_difference(cols, expected), 0.0);
}

TEST(Im2col, HandEnumeratedPatches) {
    Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor cols = bmnn::im2col(x, 2, 2, 1, 0);
    ASSERT_EQ(cols.rows(), 4u);
    ASSERT_EQ(cols.cols(), 4u);
    const std::vector<double> expected = {
        1, 2, 4, 5, // kernel offset (0,0) across the four patches
        2, 3, 5, 6, // (0,1)
        4, 5, 7, 8, // (1,0)
        5, 6, 8, 9, // (1,1)
    };
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(cols[i], expected[i]);
}

TEST(Im2col, NonIntegerOutputIsError) {
    Tensor x({1, 5, 5});
    EXPECT_THROW(bmnn::im2col(x, 2, 2, 2, 0), bmnn::ShapeError);
}

TEST(Col2im, NonOverlappingPatchesInvert) {
    bmnn::RngStream rng(5, "col2im-partition");
    Tensor x = random_tensor({2, 4, 6}, rng);
    Tensor cols = bmnn::im2col(x, 2, 2, 2, 0);
    Tensor back = bmnn::col2im(cols, {2, 4, 6}, 2, 2, 2, 0);
    EXPECT_EQ(bmnn::max_abs_difference(back, x), 0.0);
}

TEST(Col2im, CenterCellCoverageCount) {
    Tensor ones({4, 4});
    ones.fill(1.0);
    Tensor back = bmnn::col2im(ones, {1, 3, 3}, 2, 2, 1, 0);
    // patches covering each position of a 3x3 input under a 2x2 stride-1 kernel
    const std::vector<double> expected = {1, 2, 1, 2, 4, 2, 1, 2, 1};
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(back[i], expected[i]);
}

TEST(Col2im, AdjointIdentityOverRandomGeometries) {
    bmnn::RngStream rng(17, "adjoint");
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t channels = 1 + rng.index(3);
        const std::size_t k = 1 + rng.index(3);
        const std::size_t stride = 1 + rng.index(2);
        const std::size_t padding = rng.index(2);
        // choose spatial extents compatible with the stride
        const std::size_t q1 = 1 + rng.index(4);
        const std::size_t q2 = 1 + rng.index(4);
        const long h = static_cast<long>((q1 - 1) * stride + k) - 2 * static_cast<long>(padding);
        const long w = static_cast<long>((q2 - 1) * stride + k) - 2 * static_cast<long>(padding);
        if (h <= 0 || w <= 0) continue;

        Tensor x = random_tensor(
            {channels, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, rng);
        const std::vector<std::size_t> in_shape = {channels, static_cast<std::size_t>(h),
                                                   static_cast<std::size_t>(w)};
        Tensor y = random_tensor({channels * k * k, q1 * q2}, rng);
        const double lhs = dot(bmnn::im2col(x, k, k, stride, padding), y);
        const double rhs = dot(x, bmnn::col2im(y, in_shape, k, k, stride, padding));
        EXPECT_NEAR(lhs, rhs, 1e-10);
    }
}

TEST(MeanOuter, IdenticalUnitVectors) {
    Tensor a({3, 4});
    for (std::size_t x = 0; x < 4; ++x) a.at(0, x) = 1.0; // every column is e1
    Tensor m = bmnn::mean_outer(a);
    EXPECT_EQ(m.at(0, 0), 1.0);
    EXPECT_EQ(m.at(1, 1), 0.0);
    EXPECT_EQ(m.at(0, 1), 0.0);
}

TEST(MeanOuter, WhitenedBatchGivesIdentity) {
    // orthonormal rows scaled by sqrt(batch)
    Tensor a({2, 4}, {1, 1, 1, 1, 1, -1, 1, -1});
    Tensor m = bmnn::mean_outer(a);
    EXPECT_LT(bmnn::max_abs_difference(m, bmnn::identity(2)), 1e-15);
}

TEST(MeanOuter, MatchesBruteForceLoop) {
    bmnn::RngStream rng(29, "mean-outer");
    Tensor a = random_tensor({3, 5}, rng);
    Tensor expected({3, 3});
    for (std::size_t x = 0; x < 5; ++x) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                expected.at(i, j) += a.at(i, x) * a.at(j, x) / 5.0;
            }
        }
    }
    EXPECT_LT(bmnn::max_abs_difference(bmnn::mean_outer(a), expected), 1e-14);
}

TEST(MeanOuter, ExactlySymmetric) {
    bmnn::RngStream rng(31, "mean-outer-sym");
    Tensor a = random_tensor({6, 9}, rng);
    Tensor m = bmnn::mean_outer(a);
    EXPECT_EQ(bmnn::max_abs_difference(m, bmnn::transposed(m)), 0.0);
}

TEST(Rng, StreamsAreIndependentAndDeterministic) {
    bmnn::RngStream a1(42, "init");
    bmnn::RngStream a2(42, "init");
    bmnn::RngStream b(42, "shuffle");
    EXPECT_EQ(a1.next_u64(), a2.next_u64());
    EXPECT_NE(a1.next_u64(), b.next_u64());
    EXPECT_EQ(bmnn::hashed_uniform(1, "augment", 9), bmnn::hashed_uniform(1, "augment", 9));
    EXPECT_NE(bmnn::hashed_uniform(1, "augment", 9), bmnn::hashed_uniform(1, "augment", 10));
}
