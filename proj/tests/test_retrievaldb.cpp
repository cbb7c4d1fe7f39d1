#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rfuse/retrievaldb.hpp"

using namespace rfuse;
using namespace rfuse::db;

namespace {

std::vector<float> unit_vector(Rng& rng, int d) {
  std::vector<float> v(static_cast<std::size_t>(d));
  double n2 = 0;
  for (auto& x : v) {
    x = static_cast<float>(uniform(rng, -1, 1));
    n2 += double(x) * x;
  }
  for (auto& x : v) x = static_cast<float>(x / std::sqrt(n2));
  return v;
}

// 'count' entries drawn from 'distinct' prototypes, so exact duplicates (and
// distance ties) are common.
ChunkDatabase tied_database(std::size_t count, std::size_t distinct, int d, Rng& rng,
                            std::vector<std::vector<float>>& protos) {
  for (std::size_t i = 0; i < distinct; ++i) protos.push_back(unit_vector(rng, d));
  std::vector<ScalarGrid3> chunks;
  std::vector<std::string> tags;
  std::vector<float> emb;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& p = protos[uniform_index(rng, distinct)];
    emb.insert(emb.end(), p.begin(), p.end());
    chunks.push_back(ScalarGrid3::cube(2, 1.0, static_cast<float>(i % 7) / 7.0f));
    tags.push_back("train/" + std::to_string(i % 50));
  }
  ChunkDatabase db(2, d);
  db.append(std::move(chunks), std::move(tags), emb);
  return db;
}

ScalarGrid3 block_scene(int dim, Rng& rng) {
  ScalarGrid3 g = ScalarGrid3::cube(dim, 0.05, 1.0f);
  for (int b = 0; b < 12; ++b) {
    const int x0 = static_cast<int>(uniform_index(rng, dim - 8)), y0 = static_cast<int>(uniform_index(rng, dim - 8)),
              z0 = static_cast<int>(uniform_index(rng, dim - 8));
    for (int i = x0; i < x0 + 6; ++i)
      for (int j = y0; j < y0 + 6; ++j)
        for (int k = z0; k < z0 + 6; ++k) g.at(i, j, k) = 0.0f;
  }
  return g;
}

}  // namespace

TEST_CASE("vp-tree knn equals brute force with ties") {
  Rng rng = make_rng(11, "knn");
  std::vector<std::vector<float>> protos;
  const auto db = tied_database(10000, 2500, 8, rng, protos);
  std::size_t mismatches = 0;
  for (int q = 0; q < 1000; ++q) {
    // Half the queries sit exactly on stored vectors.
    const auto v = q % 2 == 0 ? protos[uniform_index(rng, protos.size())] : unit_vector(rng, 8);
    const std::size_t k = 1 + uniform_index(rng, 16);
    mismatches += db.knn(v.data(), k) != db.knn_brute(v.data(), k);
  }
  CHECK(mismatches == 0);

  const auto filter = exclude_tag(db, "train/3");
  for (int q = 0; q < 100; ++q) {
    const auto v = unit_vector(rng, 8);
    const auto a = db.knn(v.data(), 8, filter);
    CHECK(a == db.knn_brute(v.data(), 8, filter));
    for (const auto& n : a) CHECK(db.entry(db.index_of(n.id)).tag != "train/3");
  }
}

TEST_CASE("knn edge cases") {
  Rng rng = make_rng(12, "knn");
  std::vector<std::vector<float>> protos;
  const auto db = tied_database(40, 40, 6, rng, protos);
  const auto hit = db.knn(db.embedding(17), 1);
  REQUIRE(hit.size() == 1);
  CHECK(hit[0].dist2 == 0.0);
  CHECK(db.entry(db.index_of(hit[0].id)).id == hit[0].id);
  CHECK(std::equal(db.embedding(db.index_of(hit[0].id)), db.embedding(db.index_of(hit[0].id)) + 6, db.embedding(17)));

  const auto all = db.knn(protos[0].data(), db.size());
  CHECK(all.size() == db.size());
  std::vector<std::uint64_t> ids;
  for (const auto& n : all) ids.push_back(n.id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == i);
  CHECK_THROWS_AS(db.knn(protos[0].data(), db.size() + 1), std::invalid_argument);
  CHECK(db.knn(protos[0].data(), 0).empty());
}

TEST_CASE("copies and moves keep a working index") {
  Rng rng = make_rng(13, "copy");
  std::vector<std::vector<float>> protos;
  std::vector<Neighbor> expect;
  ChunkDatabase moved;
  {
    auto db = tied_database(200, 50, 6, rng, protos);
    expect = db.knn(protos[3].data(), 5);
    ChunkDatabase copy(db);
    CHECK(copy.knn(protos[3].data(), 5) == expect);
    moved = std::move(db);
  }
  CHECK(moved.knn(protos[3].data(), 5) == expect);
  ChunkDatabase assigned;
  assigned = moved;
  CHECK(assigned.knn(protos[3].data(), 5) == expect);
}

TEST_CASE("append validates input") {
  ChunkDatabase db(2, 3);
  std::vector<float> ok{1, 0, 0}, bad{1, 1, 0};
  CHECK_THROWS(db.append({ScalarGrid3::cube(2)}, {"a"}, bad));
  CHECK_THROWS(db.append({ScalarGrid3::cube(3)}, {"a"}, ok));
  CHECK_THROWS(db.append({ScalarGrid3::cube(2)}, {}, ok));
  db.append({ScalarGrid3::cube(2)}, {"a"}, ok);
  CHECK(db.size() == 1);
  CHECK(db.version() == 1);
}

TEST_CASE("database build, save and load") {
  const ChunkLayout layout{64, 16, 4};
  embed::ChunkEncoderPair enc(16, 16, 5);
  HyperParams hp;
  Rng rng = make_rng(3, "scene");
  const auto scene = block_scene(64, rng);

  BuildOptions all;
  all.filter_sparse = false;
  const auto full = build(enc, {scene}, layout, hp, all);
  CHECK(full.size() == 64);
  for (std::size_t i = 0; i < full.size(); ++i) {
    CHECK(full.entry(i).tag == "train/0");
    double n2 = 0;
    for (int j = 0; j < 16; ++j) n2 += double(full.embedding(i)[j]) * full.embedding(i)[j];
    CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-5));
  }

  const auto filtered = build(enc, {scene}, layout, hp);
  CHECK(filtered.size() <= full.size());
  std::size_t sparse = 0;
  for (std::size_t i = 0; i < filtered.size(); ++i)
    sparse += occupancy_fraction(filtered.entry(i).chunk, static_cast<float>(hp.occ_threshold)) < hp.min_chunk_occupancy;
  CHECK(sparse <= 1);

  std::stringstream ss;
  full.save(ss);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "RFDB");
  const auto back = ChunkDatabase::load(ss);
  REQUIRE(back.size() == full.size());
  std::stringstream again;
  back.save(again);
  CHECK(again.str() == bytes);
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(same_values(back.entry(i).chunk, full.entry(i).chunk));

  std::stringstream junk("RFDX....");
  CHECK_THROWS(ChunkDatabase::load(junk));
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(ChunkDatabase::load(truncated));
}

TEST_CASE("extension keeps ids stable") {
  const ChunkLayout layout{64, 16, 4};
  embed::ChunkEncoderPair enc(16, 16, 5);
  HyperParams hp;
  Rng rng = make_rng(4, "scene");
  BuildOptions all;
  all.filter_sparse = false;
  auto db = build(enc, {block_scene(64, rng)}, layout, hp, all);
  const auto v0 = db.version();
  std::stringstream before;
  db.save(before);
  extend(db, enc, {}, {});
  std::stringstream after;
  db.save(after);
  CHECK(before.str() == after.str());
  CHECK(db.version() == v0);

  // An exact duplicate ties at distance 0; the original id wins the tie.
  std::size_t pick = db.size();
  for (std::size_t i = 0; i < db.size() && pick == db.size(); ++i) {
    bool unique = true;
    for (std::size_t j = 0; j < db.size(); ++j)
      if (j != i && same_values(db.entry(i).chunk, db.entry(j).chunk)) unique = false;
    if (unique) pick = i;
  }
  REQUIRE(pick < db.size());
  const auto dup = db.entry(pick).chunk;
  extend(db, enc, {dup}, {"extra/0"});
  CHECK(db.size() == 65);
  CHECK(db.version() == v0 + 1);
  CHECK(db.entry(64).id == 64);
  const auto nn = db.knn(db.embedding(pick), 2);
  CHECK(nn[0].id == pick);
  CHECK(nn[1].id == 64);
  CHECK(nn[1].dist2 == 0.0);
  CHECK_THROWS_AS(extend(db, enc, {ScalarGrid3::cube(8)}, {"x"}), GridError);
}

TEST_CASE("approximate assembly") {
  const ChunkLayout layout{32, 8, 4};
  embed::ChunkEncoderPair enc(8, 16, 6);
  HyperParams hp;
  Rng rng = make_rng(5, "scene");
  std::vector<ScalarGrid3> scenes{block_scene(32, rng), block_scene(32, rng)};
  BuildOptions all;
  all.filter_sparse = false;
  const auto db = build(enc, scenes, layout, hp, all);
  auto query = scenes[1];
  query.set_origin(Vec3(1, 2, 3));
  const auto approx = assemble_approximations(db, enc, query, layout, 3);
  REQUIRE(approx.size() == 3);
  for (int r = 0; r < 3; ++r) {
    CHECK(approx[r].rank == r + 1);
    CHECK(approx[r].scene.dims() == query.dims());
    CHECK(approx[r].scene.origin() == query.origin());
    CHECK(approx[r].scene.voxel_size() == query.voxel_size());
    CHECK(approx[r].ids.size() == 64);
  }
  // Rank-1 slot s holds the chunk with id ids[s].
  const auto chunks = unfold(approx[0].scene, layout);
  for (std::size_t s = 0; s < chunks.size(); ++s)
    CHECK(same_values(chunks[s], db.entry(db.index_of(approx[0].ids[s])).chunk));

  // Excluding the query's own window removes every self hit.
  const auto other = assemble_approximations(db, enc, scenes[1], layout, 1, exclude_tag(db, "train/1"));
  for (auto id : other[0].ids) CHECK(db.entry(db.index_of(id)).tag == "train/0");

  CHECK_THROWS(assemble_approximations(db, enc, query, layout, 0));
  Rng r2 = make_rng(1, "random");
  CHECK(random_assembly(db, layout, r2).dims() == query.dims());
}

TEST_CASE("assembly does not depend on insertion order") {
  const ChunkLayout layout{32, 8, 4};
  embed::ChunkEncoderPair enc(8, 16, 7);
  Rng rng = make_rng(6, "scene");
  const auto scene = block_scene(32, rng);
  const auto chunks = unfold(scene, layout);
  std::vector<const ScalarGrid3*> ptrs;
  for (const auto& c : chunks) ptrs.push_back(&c);
  const auto emb = enc.embed_targets(ptrs);
  // Forward and reversed insertion with each chunk's embedding kept.
  ChunkDatabase a(8, 16), b(8, 16);
  std::vector<ScalarGrid3> ca(chunks.begin(), chunks.end()), cb(chunks.rbegin(), chunks.rend());
  std::vector<float> eb;
  for (std::size_t i = chunks.size(); i-- > 0;) eb.insert(eb.end(), emb.begin() + i * 16, emb.begin() + (i + 1) * 16);
  a.append(ca, std::vector<std::string>(ca.size(), "s"), emb);
  b.append(cb, std::vector<std::string>(cb.size(), "s"), eb);
  const auto ra = assemble_approximations(a, enc, scene, layout, 1)[0].scene;
  const auto rb = assemble_approximations(b, enc, scene, layout, 1)[0].scene;
  // Identical content up to exact-duplicate chunks.
  CHECK(same_values(ra, rb));
}

TEST_CASE("self retrieval recall counts identical chunks") {
  const ChunkLayout layout{32, 8, 4};
  embed::ChunkEncoderPair enc(8, 16, 8);
  Rng rng = make_rng(7, "scene");
  const auto scene = block_scene(32, rng);
  HyperParams hp;
  BuildOptions all;
  all.filter_sparse = false;
  const auto db = build(enc, {scene}, layout, hp, all);
  std::vector<embed::ChunkPair> pairs;
  for (const auto& c : unfold(scene, layout)) pairs.push_back({c, c});
  CHECK(self_retrieval_recall(db, enc, pairs, static_cast<int>(db.size())) == 1.0);
  const double r1 = self_retrieval_recall(db, enc, pairs, 1);
  CHECK(r1 >= 0.0);
  CHECK(r1 <= 1.0);
  CHECK_THROWS(self_retrieval_recall(db, enc, {}, 1));
}
