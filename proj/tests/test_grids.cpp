#include <doctest.h>

#include <set>
#include <sstream>
#include <tuple>

#include "rfuse/grids.hpp"
#include "rfuse/rng.hpp"

using namespace rfuse;

namespace {

ScalarGrid3 random_grid(Dims3 d, std::uint64_t seed) {
  ScalarGrid3 g(d, 0.125, Vec3(0.5, -1.0, 2.0));
  Rng rng(seed);
  for (auto& v : g.values()) v = static_cast<float>(uniform01(rng));
  return g;
}

}  // namespace

TEST_CASE("normalize_tdf clamps and scales") {
  ScalarGrid3 raw({1, 1, 4}, 1.0);
  raw[0] = 0.0f;
  raw[1] = 3.0f;
  raw[2] = 7.5f;
  raw[3] = 1.5f;
  auto out = normalize_tdf(raw, 3.0);
  CHECK(out[0] == 0.0f);
  CHECK(out[1] == 1.0f);
  CHECK(out[2] == 1.0f);
  CHECK(out[3] == doctest::Approx(0.5));

  raw[0] = -0.1f;
  CHECK_THROWS_AS(normalize_tdf(raw, 3.0), GridError);
  CHECK_THROWS_AS(normalize_tdf(out, 0.0), GridError);
}

TEST_CASE("normalize_tdf is bounded and monotone") {
  Rng rng(11);
  ScalarGrid3 raw({1, 1, 500}, 1.0);
  for (auto& v : raw.values()) v = static_cast<float>(uniform(rng, 0.0, 10.0));
  auto out = normalize_tdf(raw, 3.0);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    CHECK(out[i] >= 0.0f);
    CHECK(out[i] <= 1.0f);
    for (std::size_t j = 0; j < 20 && j < raw.size(); ++j)
      if (raw[i] <= raw[j]) CHECK(out[i] <= out[j]);
  }
}

TEST_CASE("unfold paper layout yields 64 chunks") {
  auto scene = random_grid({64, 64, 64}, 3);
  auto chunks = unfold(scene, ChunkLayout::paper());
  REQUIRE(chunks.size() == 64);
  for (const auto& c : chunks) CHECK(c.dims() == Dims3{16, 16, 16});
  // Lexicographic order: chunk 1 is (0,0,1).
  CHECK(chunks[1].at(0, 0, 0) == scene.at(0, 0, 16));
  CHECK(chunks[16].at(0, 0, 0) == scene.at(16, 0, 0));
}

TEST_CASE("unfold of a single chunk scene is the identity") {
  auto scene = random_grid({16, 16, 16}, 5);
  auto chunks = unfold(scene, {16, 16, 4});
  REQUIRE(chunks.size() == 1);
  CHECK(chunks[0].identical(scene));
}

TEST_CASE("unfold rejects wrong scene dims and fold rejects bad chunk sets") {
  auto scene = random_grid({32, 32, 16}, 1);
  CHECK_THROWS_AS(unfold(scene, {32, 16, 4}), GridError);
  auto chunks = unfold(random_grid({32, 32, 32}, 1), {32, 16, 4});
  chunks.pop_back();
  CHECK_THROWS_AS(fold(chunks, {32, 16, 4}), GridError);
  chunks.push_back(random_grid({8, 8, 8}, 2));
  CHECK_THROWS_AS(fold(chunks, {32, 16, 4}), GridError);
}

TEST_CASE("fold(unfold(x)) == x bitwise over random seeds") {
  const ChunkLayout layout{32, 16, 4};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto scene = random_grid({32, 32, 32}, seed);
    auto back = fold(unfold(scene, layout), layout);
    REQUIRE(back.identical(scene));
  }
}

TEST_CASE("fold of constant and corner-zero chunk sets") {
  const ChunkLayout layout = ChunkLayout::paper();
  ScalarGrid3 constant = ScalarGrid3::cube(64, 1.0, 0.7f);
  auto back = fold(unfold(constant, layout), layout);
  for (float v : back.values()) CHECK(v == 0.7f);

  std::vector<ScalarGrid3> chunks(64, ScalarGrid3::cube(16, 1.0, 1.0f));
  chunks[0] = ScalarGrid3::cube(16, 1.0, 0.0f);
  auto scene = fold(chunks, layout);
  for (int i = 0; i < 64; i += 5)
    for (int j = 0; j < 64; j += 7)
      for (int k = 0; k < 64; k += 3)
        CHECK(scene.at(i, j, k) == ((i < 16 && j < 16 && k < 16) ? 0.0f : 1.0f));
}

TEST_CASE("sliding windows") {
  const ChunkLayout layout = ChunkLayout::paper();
  SUBCASE("128x64x64 gives two windows") {
    auto wins = windows(ScalarGrid3({128, 64, 64}, 1.0), layout, 64);
    CHECK(wins.size() == 2);
  }
  SUBCASE("one window equals the scene") {
    auto scene = random_grid({64, 64, 64}, 9);
    auto wins = windows(scene, layout, 64);
    REQUIRE(wins.size() == 1);
    CHECK(wins[0].grid.identical(scene));
  }
  SUBCASE("70^3 pads to eight windows and reassembles exactly") {
    auto scene = random_grid({70, 70, 70}, 4);
    auto wins = windows(scene, layout, 64);
    REQUIRE(wins.size() == 8);
    // Padding beyond the scene is empty space.
    CHECK(wins.back().grid.at(63, 63, 63) == kEmptyTdf);
    auto back = reassemble(wins, scene.dims(), scene.voxel_size(), scene.origin());
    CHECK(back.identical(scene));
  }
  CHECK_THROWS_AS(windows(ScalarGrid3::cube(64), layout, 0), GridError);
}

TEST_CASE("occupancy_from_points") {
  const Dims3 d{8, 8, 8};
  SUBCASE("empty list") {
    auto res = occupancy_from_points({}, d, 0.5, Vec3::Zero());
    for (float v : res.grid.values()) CHECK(v == 0.0f);
  }
  SUBCASE("one point at a voxel center") {
    ScalarGrid3 ref(d, 0.5, Vec3::Zero());
    std::vector<Vec3> pts{ref.voxel_center(2, 3, 4)};
    auto res = occupancy_from_points(pts, d, 0.5, Vec3::Zero());
    double sum = 0;
    for (float v : res.grid.values()) sum += v;
    CHECK(sum == 1.0);
    CHECK(res.grid.at(2, 3, 4) == 1.0f);
  }
  SUBCASE("random points against a hash-set oracle") {
    Rng rng(42);
    std::vector<Vec3> pts;
    for (int i = 0; i < 1000; ++i) pts.emplace_back(uniform(rng, -0.5, 4.5), uniform(rng, -0.5, 4.5), uniform(rng, -0.5, 4.5));
    std::set<std::tuple<int, int, int>> cells;
    std::size_t outside = 0;
    for (const auto& p : pts) {
      const int i = static_cast<int>(std::floor(p.x() / 0.5)), j = static_cast<int>(std::floor(p.y() / 0.5)),
                k = static_cast<int>(std::floor(p.z() / 0.5));
      if (i < 0 || j < 0 || k < 0 || i >= 8 || j >= 8 || k >= 8)
        ++outside;
      else
        cells.emplace(i, j, k);
    }
    auto res = occupancy_from_points(pts, d, 0.5, Vec3::Zero());
    double sum = 0;
    for (float v : res.grid.values()) sum += v;
    CHECK(sum == static_cast<double>(cells.size()));
    CHECK(res.outside == outside);

    // Permutation invariance.
    auto shuffled = pts;
    shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(occupancy_from_points(shuffled, d, 0.5, Vec3::Zero()).grid.identical(res.grid));
  }
}

TEST_CASE("coarsen min-pools") {
  auto ones = ScalarGrid3::cube(16, 0.25, 1.0f);
  auto c = coarsen(ones, 4);
  CHECK(c.dims() == Dims3{4, 4, 4});
  CHECK(c.voxel_size() == 1.0);
  for (float v : c.values()) CHECK(v == 1.0f);

  auto g = random_grid({8, 8, 8}, 3);
  CHECK(coarsen(g, 1).identical(g));

  ones.at(5, 6, 7) = 0.0f;
  auto c2 = coarsen(ones, 4);
  CHECK(c2.at(1, 1, 1) == 0.0f);
  CHECK(c2.at(0, 0, 0) == 1.0f);
  CHECK_THROWS_AS(coarsen(ScalarGrid3({6, 8, 8}, 1.0), 4), GridError);
}

TEST_CASE("RFG1 round trip and header layout") {
  auto g = random_grid({3, 4, 5}, 8);
  std::stringstream ss;
  write_grid(ss, g);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 4 + 12 + 16 + 60 * 4);
  CHECK(bytes.substr(0, 4) == "RFG1");
  auto back = read_grid(ss);
  CHECK(back.identical(g));

  std::stringstream bad("RFGX");
  CHECK_THROWS(read_grid(bad));
}
