#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "gae/explainer.hpp"

using namespace gae;

namespace {

Dictionary tiny_dict() {
  Dictionary d;
  d.d_enc = 2;
  d.d_dec = 2;
  d.k = 3;
  d.w_enc.resize(3, 2);
  d.w_enc << 1.0, 0.0, 0.0, 1.0, -1.0, 1.0;
  d.b_enc.resize(3);
  d.b_enc << 0.0, -0.5, 0.25;
  d.w_dec.resize(2, 3);
  d.w_dec << 1.0, 0.0, 2.0, 0.0, 1.0, -1.0;
  d.b_dec.resize(2);
  d.b_dec << 0.5, -0.5;
  d.sparsifier.kind = SparsifierKind::relu;
  return d;
}

Dictionary random_dict(uint64_t seed, int d_enc, int d_dec, int k) {
  Rng rng(seed);
  Dictionary d;
  d.d_enc = d_enc;
  d.d_dec = d_dec;
  d.k = k;
  d.w_enc = rng.normal_mat(k, d_enc);
  d.b_enc = rng.normal_vec(k);
  d.w_dec = rng.normal_mat(d_dec, k);
  d.b_dec = rng.normal_vec(d_dec);
  d.sparsifier.kind = SparsifierKind::topk;
  d.sparsifier.k_active = std::max(1, k / 4);
  d.seed_lineage = seed;
  return d;
}

std::string temp_path(const char* name) { return std::string("tmp_explainer_") + name; }

}  // namespace

TEST_CASE("relu encode matches the hand computation") {
  Dictionary d = tiny_dict();
  Vec h(2);
  h << 2.0, 1.0;
  // pre-activations: [2, 1-0.5, -2+1+0.25] = [2, 0.5, -0.75]
  Vec z = encode(d, h);
  CHECK(z(0) == doctest::Approx(2.0));
  CHECK(z(1) == doctest::Approx(0.5));
  CHECK(z(2) == doctest::Approx(0.0));

  Vec recon = reconstruct(d, z);
  // w_dec z + b_dec = [2 + 0 + 0, 0 + 0.5 - 0] + [0.5, -0.5]
  CHECK(recon(0) == doctest::Approx(2.5));
  CHECK(recon(1) == doctest::Approx(0.0));
  CHECK((forward(d, h) - recon).norm() <= 1e-15);
}

TEST_CASE("topk keeps the largest post-relu entries, ties to lower index") {
  Dictionary d = tiny_dict();
  d.sparsifier.kind = SparsifierKind::topk;
  d.sparsifier.k_active = 1;
  Vec h(2);
  h << 2.0, 1.0;
  Vec z = encode(d, h);  // post-relu [2, 0.5, 0] -> keep index 0
  CHECK(z(0) == doctest::Approx(2.0));
  CHECK(z(1) == 0.0);
  CHECK(z(2) == 0.0);

  // exact tie between features 0 and 1
  d.w_enc << 1.0, 0.0, 1.0, 0.0, 0.0, 1.0;
  d.b_enc.setZero();
  z = encode(d, h);
  CHECK(z(0) == doctest::Approx(2.0));
  CHECK(z(1) == 0.0);

  // k_active >= k degrades to plain relu
  d.sparsifier.k_active = 3;
  z = encode(d, h);
  CHECK((z.array() > 0.0).count() == 3);
}

TEST_CASE("encode_batch agrees with per-row encode") {
  Dictionary d = random_dict(5, 6, 4, 16);
  Rng rng(99);
  Mat rows = rng.normal_mat(20, 6);
  Mat z = encode_batch(d, rows);
  REQUIRE(z.rows() == 20);
  REQUIRE(z.cols() == 16);
  for (int i = 0; i < rows.rows(); ++i)
    CHECK((z.row(i).transpose() - encode(d, rows.row(i).transpose())).norm() <= 1e-14);
  for (int i = 0; i < z.rows(); ++i)
    CHECK((z.row(i).array() > 0.0).count() <= d.sparsifier.k_active);
}

TEST_CASE("batch error is the mean squared residual") {
  Dictionary d = random_dict(7, 5, 5, 12);
  d.kind_tag = DictionaryKind::sae;
  Rng rng(8);
  ActivationBatch batch;
  batch.data = rng.normal_mat(15, 5);
  double err = batch_reconstruction_error(d, batch);
  double manual = 0.0;
  for (int i = 0; i < batch.n(); ++i)
    manual += (forward(d, batch.data.row(i).transpose()) - batch.data.row(i).transpose())
                  .squaredNorm();
  CHECK(err == doctest::Approx(manual / batch.n()).epsilon(1e-12));

  // transcoder scores against the paired stream and requires it
  Dictionary tc = random_dict(9, 4, 6, 10);
  tc.kind_tag = DictionaryKind::transcoder;
  ActivationBatch pair;
  pair.data = rng.normal_mat(10, 4);
  CHECK_THROWS_AS(batch_reconstruction_error(tc, pair), Error);
  pair.target = rng.normal_mat(10, 6);
  double terr = batch_reconstruction_error(tc, pair);
  manual = 0.0;
  for (int i = 0; i < pair.n(); ++i)
    manual += (forward(tc, pair.data.row(i).transpose()) - pair.target->row(i).transpose())
                  .squaredNorm();
  CHECK(terr == doctest::Approx(manual / pair.n()).epsilon(1e-12));
}

TEST_CASE("perfect dictionary scores zero") {
  // identity encoder/decoder on 2 features reconstructs nonnegative data exactly
  Dictionary d;
  d.d_enc = d.d_dec = d.k = 2;
  d.w_enc = Mat::Identity(2, 2);
  d.b_enc = Vec::Zero(2);
  d.w_dec = Mat::Identity(2, 2);
  d.b_dec = Vec::Zero(2);
  ActivationBatch batch;
  batch.data.resize(3, 2);
  batch.data << 1.0, 2.0, 0.5, 0.0, 3.0, 1.0;
  CHECK(batch_reconstruction_error(d, batch) <= 1e-15);
}

TEST_CASE("dictionary checkpoint round-trips bit-exactly") {
  Dictionary d = random_dict(21, 7, 9, 24);
  d.kind_tag = DictionaryKind::transcoder;
  std::string path = temp_path("dict.gaedict");
  save_dictionary(path, d);
  Dictionary back = load_dictionary(path);
  CHECK(back.d_enc == d.d_enc);
  CHECK(back.d_dec == d.d_dec);
  CHECK(back.k == d.k);
  CHECK(back.sparsifier.kind == d.sparsifier.kind);
  CHECK(back.sparsifier.k_active == d.sparsifier.k_active);
  CHECK(back.kind_tag == d.kind_tag);
  CHECK(back.seed_lineage == d.seed_lineage);
  CHECK(back.w_enc == d.w_enc);  // exact doubles, no rounding through the file
  CHECK(back.b_enc == d.b_enc);
  CHECK(back.w_dec == d.w_dec);
  CHECK(back.b_dec == d.b_dec);
  std::remove(path.c_str());
}

TEST_CASE("activation batches round-trip with and without targets") {
  Rng rng(31);
  ActivationBatch b;
  b.data = rng.normal_mat(11, 5);
  std::string path = temp_path("batch.gaebatch");
  save_activations(path, b);
  ActivationBatch back = load_activations(path);
  CHECK(back.data == b.data);
  CHECK_FALSE(back.target.has_value());

  b.target = rng.normal_mat(11, 8);
  save_activations(path, b);
  back = load_activations(path);
  REQUIRE(back.target.has_value());
  CHECK(*back.target == *b.target);
  CHECK(&back.reconstruction_target() == &*back.target);
  std::remove(path.c_str());
}

TEST_CASE("second moments share the container but are flagged") {
  Rng rng(41);
  Mat a = rng.normal_mat(6, 6);
  SecondMoment m = make_second_moment(a * a.transpose());
  std::string path = temp_path("moment.gaebatch");
  save_second_moment(path, m);
  CHECK(file_holds_second_moment(path));
  SecondMoment back = load_second_moment(path);
  CHECK(back.matrix == m.matrix);

  // loading through the wrong reader is a typed format error
  try {
    load_activations(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind == ErrorKind::format);
  }

  ActivationBatch b;
  b.data = rng.normal_mat(3, 2);
  save_activations(path, b);
  CHECK_FALSE(file_holds_second_moment(path));
  CHECK_THROWS_AS(load_second_moment(path), Error);
  std::remove(path.c_str());
}

TEST_CASE("corrupt files fail loudly") {
  std::string path = temp_path("corrupt.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "GARBAGE!not a checkpoint";
  }
  try {
    load_dictionary(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind == ErrorKind::format);
  }
  CHECK_THROWS_AS(load_activations(path), Error);

  // truncation after a valid header
  Dictionary d = random_dict(3, 4, 4, 8);
  save_dictionary(path, d);
  {
    std::ifstream is(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(all.data(), std::streamsize(all.size() / 2));
  }
  CHECK_THROWS_AS(load_dictionary(path), Error);
  CHECK_THROWS_AS(load_dictionary("no_such_file.gaedict"), Error);
  std::remove(path.c_str());
}

TEST_CASE("shape violations are rejected") {
  Dictionary d = tiny_dict();
  Vec wrong(3);
  wrong << 1.0, 2.0, 3.0;
  CHECK_THROWS_AS(encode(d, wrong), Error);
  CHECK_THROWS_AS(reconstruct(d, wrong.head(2)), Error);

  d.w_dec.resize(2, 2);  // inconsistent with k = 3
  CHECK_THROWS_AS(d.validate(), Error);

  Dictionary bad_topk = tiny_dict();
  bad_topk.sparsifier.kind = SparsifierKind::topk;
  bad_topk.sparsifier.k_active = 0;
  CHECK_THROWS_AS(bad_topk.validate(), Error);

  ActivationBatch mismatched;
  mismatched.data = Mat::Zero(4, 2);
  mismatched.target = Mat::Zero(3, 2);
  CHECK_THROWS_AS(mismatched.validate(), Error);
}
