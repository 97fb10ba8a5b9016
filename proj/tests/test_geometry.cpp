#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <sstream>

#include "support.hpp"

using namespace transolver;

namespace {

Vec3 normal_area_sum(const MeshBatch& m) {
  Vec3 s{};
  for (std::size_t i = 0; i < m.size(); ++i)
    for (int k = 0; k < 3; ++k) s[k] += (*m.normals)(i, k) * (*m.areas)(i, 0);
  return s;
}

double field(double x, double y, double z) { return manufactured_pressure(x, y, z); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

}  // namespace

TEST(SphereMesh, AreasSumToSurface) {
  for (std::size_t n : {4u, 100u, 1000u}) {
    const auto m = gen_sphere_mesh(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GT((*m.areas)(i, 0), 0.0);
      s += (*m.areas)(i, 0);
    }
    EXPECT_NEAR(s, 4 * std::numbers::pi, 1e-12);
  }
  EXPECT_THROW(gen_sphere_mesh(3), ShapeError);
}

TEST(SphereMesh, UnitNormalsOnUnitSphere) {
  const auto m = gen_sphere_mesh(777);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Vec3 n{(*m.normals)(i, 0), (*m.normals)(i, 1), (*m.normals)(i, 2)};
    const Vec3 x{m.coords(i, 0), m.coords(i, 1), m.coords(i, 2)};
    EXPECT_NEAR(norm(n), 1.0, 1e-12);
    EXPECT_NEAR(norm(x), 1.0, 1e-12);
    EXPECT_NEAR(dot(n, x), 1.0, 1e-12);
  }
  m.validate();
}

TEST(SphereMesh, ClosedSurfaceIdentity) {
  EXPECT_LE(norm(normal_area_sum(gen_sphere_mesh(1000))), 0.2);
  // Random area-uniform sampling shrinks roughly as N^-1/2.
  Rng rng(1);
  std::vector<double> ns, rms;
  for (std::size_t n : {100u, 1000u, 10000u}) {
    double sq = 0.0;
    for (int r = 0; r < 30; ++r) sq += std::pow(norm(normal_area_sum(random_sphere_sample(n, rng))), 2);
    ns.push_back(double(n));
    rms.push_back(std::sqrt(sq / 30));
  }
  EXPECT_NEAR(loglog_slope(ns, rms), -0.5, 0.15);
}

TEST(ManufacturedField, ClosedFormAndDeterministic) {
  EXPECT_NEAR(manufactured_pressure(0.1, 0.2, 0.3), std::sin(0.3) * std::cos(0.4) + 0.09, 1e-15);
  EXPECT_EQ(manufactured_pressure(0, 0, 0), 0.0);
  const auto m = gen_sphere_mesh(50);
  EXPECT_EQ(manufactured_field(m.coords), manufactured_field(gen_sphere_mesh(50).coords));
}

TEST(ManufacturedShear, IsTangential) {
  const auto m = gen_sphere_mesh(200);
  const auto tau = manufactured_shear(m.coords, *m.normals);
  double worst = 0.0, mag = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
      d += tau(i, k) * (*m.normals)(i, k);
      mag = std::max(mag, std::abs(tau(i, k)));
    }
    worst = std::max(worst, std::abs(d));
  }
  EXPECT_LE(worst, 1e-12);
  EXPECT_GT(mag, 0.1);
}

TEST(IntegrateForce, ConstantPressureGivesNoForce) {
  const auto m = gen_sphere_mesh(4096);
  const double c = 2.5;
  FlowConstants fc;
  fc.p_inf = 1.0;
  const std::vector<double> p(m.size(), fc.p_inf + c);
  EXPECT_LE(norm(integrate_force(m, p, nullptr, fc).force), 0.05 * c);
}

TEST(IntegrateForce, ExplicitSumAndCoefficients) {
  const auto m = gen_sphere_mesh(64);
  const auto p = manufactured_field(m.coords);
  const auto tau = manufactured_shear(m.coords, *m.normals);
  FlowConstants fc;
  fc.rho_inf = 1.2;
  fc.v_inf = 3.0;
  const auto r = integrate_force(m, p.data(), &tau, fc);
  Vec3 f{};
  for (std::size_t i = 0; i < 64; ++i)
    for (int k = 0; k < 3; ++k) f[k] += (-p(i, 0) * (*m.normals)(i, k) + tau(i, k)) * (*m.areas)(i, 0);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.force[k], f[k], 1e-13);
  EXPECT_NEAR(r.cd, f[0] / (0.5 * 1.2 * 9.0 * std::numbers::pi), 1e-13);
  EXPECT_NEAR(r.cl, f[2] / (0.5 * 1.2 * 9.0 * std::numbers::pi), 1e-13);
}

TEST(IntegrateForce, DoublingAreaHalvesCd) {
  const auto m = gen_sphere_mesh(500);
  const auto p = manufactured_field(m.coords);
  FlowConstants fc;
  const double cd = integrate_force(m, p, fc).cd;
  fc.a_ref *= 2;
  EXPECT_EQ(integrate_force(m, p, fc).cd, cd / 2);
}

TEST(IntegrateForce, RejectsMissingGeometry) {
  auto m = gen_sphere_mesh(10);
  m.normals.reset();
  EXPECT_THROW(integrate_force(m, Matrix<double>(10, 1), FlowConstants{}), ShapeError);
  FlowConstants bad;
  bad.v_inf = 0;
  EXPECT_THROW(integrate_force(gen_sphere_mesh(10), Matrix<double>(10, 1), bad), DegenerateError);
}

TEST(Quadrature, RandomSamplingSlope) {
  const FlowConstants fc;
  const double ref = reference_drag_coefficient(field, fc);
  const std::vector<std::size_t> sizes{100, 1000, 10000};
  const auto rep = quadrature_convergence(field, sizes, ref, fc, 40, 7);
  EXPECT_GE(rep.slope, -0.7);
  EXPECT_LE(rep.slope, -0.3);
  EXPECT_GT(rep.points[0].error, rep.points[2].error);
}

TEST(Quadrature, ConstantFieldHasNoError) {
  const FlowConstants fc;
  auto constant = [](double, double, double) { return 4.0; };
  const std::vector<std::size_t> sizes{100, 1000, 10000};
  // The exact drag of a constant pressure is zero, but random samples do not
  // close the surface; the Fibonacci family does to within round-off.
  for (std::size_t n : sizes) EXPECT_LE(std::abs(drag_coefficient(gen_sphere_mesh(n), constant, fc)), 0.05);
  const double ref = reference_drag_coefficient(constant, fc, 10000);
  EXPECT_THROW(quadrature_convergence(constant, std::vector<std::size_t>{10, 20, 40}, ref, fc, 2, 1), ShapeError);
}

TEST(Quadrature, FullMeshBeatsSubsets) {
  const FlowConstants fc;
  const double ref = reference_drag_coefficient(field, fc);
  const auto full = gen_sphere_mesh(2000);
  const double full_err = std::abs(drag_coefficient(full, field, fc) - ref);
  for (std::size_t n : {200u, 1000u, 1900u}) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      auto sub = amortized_sample(full, n, rng);
      *sub.areas *= 2000.0 / static_cast<double>(n);
      errs.push_back(std::abs(drag_coefficient(sub, field, fc) - ref));
    }
    EXPECT_LT(full_err, median(errs)) << n;
  }
}

TEST(Quadrature, SlopeOfExactPowerLaw) {
  const std::vector<double> x{1, 10, 100}, y{1, 0.1, 0.01};
  EXPECT_NEAR(loglog_slope(x, y), -1.0, 1e-12);
  // Zero errors are dropped from the fit.
  const std::vector<double> y0{1, 0.1, 0.0};
  EXPECT_NEAR(loglog_slope(x, y0), -1.0, 1e-12);
}

TEST(Metrics, DefinitionalIdentities) {
  Rng rng(3);
  const auto y = rng.uniform_matrix(40, 2, -1, 1);
  const auto same = metrics(y, y);
  EXPECT_EQ(same.rel_l2, 0.0);
  EXPECT_EQ(*same.r2[0], 1.0);
  EXPECT_EQ(same.mae[1], 0.0);
  EXPECT_EQ(rel_l2(Matrix<double>(40, 2), y), 1.0);
  Matrix<double> mean_pred(40, 2);
  for (std::size_t j = 0; j < 2; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < 40; ++i) mu += y(i, j);
    for (std::size_t i = 0; i < 40; ++i) mean_pred(i, j) = mu / 40;
  }
  for (const auto& r2 : metrics(mean_pred, y).r2) EXPECT_NEAR(*r2, 0.0, 1e-14);
}

TEST(Metrics, ConstantTruthLeavesR2Undefined) {
  const Matrix<double> truth(5, 1, 2.0);
  const auto rep = metrics(Matrix<double>(5, 1, 1.0), truth);
  EXPECT_FALSE(rep.r2[0].has_value());
  EXPECT_EQ(rep.mae[0], 1.0);
  EXPECT_EQ(rep.rel_l2, 0.5);
  EXPECT_THROW(rel_l2(Matrix<double>(5, 1), Matrix<double>(5, 1)), DegenerateError);
  EXPECT_THROW(rel_l2(Matrix<double>(5, 1), Matrix<double>(4, 1, 1.0)), ShapeError);
}

TEST(MeshIo, RoundTripIsBitExact) {
  Rng rng(4);
  auto m = random_sphere_sample(300, rng);
  m.targets = rng.uniform_matrix(300, 2, -1e-300, 1e300);
  (*m.targets)(0, 0) = 1.0 / 3.0;
  (*m.targets)(1, 1) = -0.0;
  std::stringstream ss;
  write_mesh(ss, m);
  const auto back = read_mesh(ss);
  EXPECT_EQ(back.coords, m.coords);
  EXPECT_EQ(*back.normals, *m.normals);
  EXPECT_EQ(*back.areas, *m.areas);
  EXPECT_EQ(*back.targets, *m.targets);
  EXPECT_TRUE(std::signbit((*back.targets)(1, 1)));
}

TEST(MeshIo, HeaderNamesColumns) {
  auto m = gen_sphere_mesh(5);
  m.targets = Matrix<double>(5, 2);
  std::stringstream ss;
  write_mesh(ss, m);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "x,y,z,nx,ny,nz,area,t1,t2");
  MeshBatch bare;
  bare.coords = Matrix<double>(2, 3, 0.5);
  bare.features = Matrix<double>(2, 0);
  std::stringstream s2;
  write_mesh(s2, bare);
  EXPECT_EQ(s2.str(), "x,y,z\n0.5,0.5,0.5\n0.5,0.5,0.5\n");
}

TEST(MeshIo, ChunkedReadMatchesWholeRead) {
  auto m = transolver::testing::random_mesh(100, 5, 2);
  std::stringstream ss;
  write_mesh(ss, m);
  const std::string text = ss.str();
  std::istringstream whole_is(text), chunk_is(text);
  const auto whole = read_mesh(whole_is);
  ChunkedMeshReader reader(chunk_is);
  MeshBatch joined;
  std::size_t chunks = 0;
  while (auto c = reader.next(7)) {
    EXPECT_EQ(c->original_index(0), chunks * 7);
    joined.append(*c);
    ++chunks;
  }
  EXPECT_EQ(chunks, 15u);
  EXPECT_EQ(reader.rows_read(), 100u);
  EXPECT_EQ(joined.coords, whole.coords);
  EXPECT_EQ(*joined.targets, *whole.targets);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(joined.original_index(i), whole.original_index(i));
}

TEST(MeshIo, TruncatedFileNamesOffset) {
  std::istringstream is("x,y,z,t1\n1,2,3,4\n5,6");
  try {
    read_mesh(is);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_EQ(e.offset(), 17u);
    EXPECT_NE(std::string(e.what()).find("byte offset 17"), std::string::npos);
  }
}

TEST(MeshIo, MalformedInputRejected) {
  for (const char* text : {"x,y\n1,2\n", "a,b,c\n1,2,3\n", "x,y,z\n1,2,abc\n", "x,y,z\n1,2,3,4\n", "", "x,y,z,area\n1,2,3,-1\n"}) {
    std::istringstream is(text);
    EXPECT_THROW(read_mesh(is), FormatError) << text;
  }
}
