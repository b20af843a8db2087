#include "gae/explainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

namespace gae {

void Dictionary::validate() const {
  require(d_enc >= 1 && d_dec >= 1 && k >= 1, ErrorKind::bad_input,
          "dictionary dims must be positive");
  require(w_enc.rows() == k && w_enc.cols() == d_enc && b_enc.size() == k &&
              w_dec.rows() == d_dec && w_dec.cols() == k && b_dec.size() == d_dec,
          ErrorKind::dim_mismatch, "dictionary tensor shapes inconsistent");
  require(w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite(),
          ErrorKind::bad_input, "dictionary has non-finite entries");
  if (sparsifier.kind == SparsifierKind::topk)
    require(sparsifier.k_active >= 1 && sparsifier.k_active <= k, ErrorKind::bad_input,
            "k_active must lie in [1, k]");
}

void ActivationBatch::validate() const {
  require(data.allFinite(), ErrorKind::bad_input, "activation batch has non-finite entries");
  if (target) {
    require(target->rows() == data.rows(), ErrorKind::dim_mismatch,
            "paired target row count differs from batch");
    require(target->allFinite(), ErrorKind::bad_input, "paired target has non-finite entries");
  }
}

namespace {

// keep the k_active largest post-ReLU values, ties to the lower feature index
template <typename D>
void sparsify_row(const Eigen::MatrixBase<D>& row, const SparsifierSpec& spec) {
  auto& z = const_cast<Eigen::MatrixBase<D>&>(row);  // Eigen writable-expression idiom
  for (int j = 0; j < z.size(); ++j) z(j) = std::max(z(j), 0.0);
  if (spec.kind == SparsifierKind::relu) return;
  int k = int(z.size()), ka = spec.k_active;
  if (ka >= k) return;
  std::vector<int> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  auto pref = [&](int a, int b) { return z(a) > z(b) || (z(a) == z(b) && a < b); };
  std::nth_element(idx.begin(), idx.begin() + ka, idx.end(), pref);
  for (int i = ka; i < k; ++i) z(idx[i]) = 0.0;
}

}  // namespace

Vec encode(const Dictionary& dict, const Vec& h) {
  require(h.size() == dict.d_enc, ErrorKind::dim_mismatch, "encode: input width mismatch");
  Vec z = dict.w_enc * h + dict.b_enc;
  sparsify_row(z, dict.sparsifier);
  return z;
}

Mat encode_batch(const Dictionary& dict, const Mat& rows) {
  require(rows.cols() == dict.d_enc, ErrorKind::dim_mismatch, "encode: input width mismatch");
  Mat z = rows * dict.w_enc.transpose();
  z.rowwise() += dict.b_enc.transpose();
  for (int i = 0; i < z.rows(); ++i) sparsify_row(z.row(i), dict.sparsifier);
  return z;
}

Vec reconstruct(const Dictionary& dict, const Vec& z) {
  require(z.size() == dict.k, ErrorKind::dim_mismatch, "reconstruct: code width mismatch");
  return dict.w_dec * z + dict.b_dec;
}

Vec forward(const Dictionary& dict, const Vec& h) { return reconstruct(dict, encode(dict, h)); }

double batch_reconstruction_error(const Dictionary& dict, const ActivationBatch& batch) {
  batch.validate();
  require(batch.n() >= 1, ErrorKind::bad_input, "empty batch");
  if (dict.kind_tag == DictionaryKind::transcoder)
    require(batch.target.has_value(), ErrorKind::bad_input,
            "transcoder evaluation needs the paired target stream");
  const Mat& target = dict.kind_tag == DictionaryKind::transcoder ? *batch.target : batch.data;
  require(target.cols() == dict.d_dec, ErrorKind::dim_mismatch,
          "reconstruction target width mismatch");
  Mat recon = encode_batch(dict, batch.data) * dict.w_dec.transpose();
  recon.rowwise() += dict.b_dec.transpose();
  return (recon - target).rowwise().squaredNorm().mean();
}

// ---------------------------------------------------------------------------
// serialization: 16-byte magic+version header, then little-endian payloads.
// Dictionary checkpoint carries a JSON metadata document with a tensor-offset
// manifest, followed by raw 64-bit row-major blocks. Assumes LE host.

namespace {

constexpr char kDictMagic[8] = {'G', 'A', 'E', 'D', 'I', 'C', 'T', '\0'};
constexpr char kBatchMagic[8] = {'G', 'A', 'E', 'B', 'A', 'T', 'C', 'H'};
constexpr uint8_t kFormatVersion = 1;

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  require(bool(is), ErrorKind::format, "unexpected end of file");
  return v;
}

void write_block(std::ostream& os, const Mat& m) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      double v = m(i, j);
      os.write(reinterpret_cast<const char*>(&v), 8);
    }
}

Mat read_block(std::istream& is, uint64_t rows, uint64_t cols) {
  Mat m(rows, cols);
  for (uint64_t i = 0; i < rows; ++i)
    for (uint64_t j = 0; j < cols; ++j) {
      double v;
      is.read(reinterpret_cast<char*>(&v), 8);
      require(bool(is), ErrorKind::format, "unexpected end of file in tensor block");
      m(i, j) = v;
    }
  return m;
}

struct Header {
  uint8_t version;
  uint8_t has_target;
  uint8_t content;  // 0 activations, 1 second moment
};

void write_header(std::ostream& os, const char magic[8], Header h) {
  char buf[16] = {};
  std::memcpy(buf, magic, 8);
  buf[8] = char(h.version);
  buf[9] = char(h.has_target);
  buf[10] = char(h.content);
  os.write(buf, 16);
}

Header read_header(std::istream& is, const char magic[8], const char* what) {
  char buf[16] = {};
  is.read(buf, 16);
  require(bool(is) && std::memcmp(buf, magic, 8) == 0, ErrorKind::format,
          std::string("bad magic bytes: not a ") + what + " file");
  Header h{uint8_t(buf[8]), uint8_t(buf[9]), uint8_t(buf[10])};
  require(h.version == kFormatVersion, ErrorKind::format, "unsupported format version");
  return h;
}

}  // namespace

void save_dictionary(const std::string& path, const Dictionary& dict) {
  dict.validate();
  nlohmann::json meta;
  meta["d_enc"] = dict.d_enc;
  meta["d_dec"] = dict.d_dec;
  meta["k"] = dict.k;
  meta["sparsifier"] = {{"kind", dict.sparsifier.kind == SparsifierKind::relu ? "relu" : "topk"},
                        {"k_active", dict.sparsifier.k_active}};
  meta["kind_tag"] = dict.kind_tag == DictionaryKind::sae ? "sae" : "transcoder";
  meta["seed_lineage"] = dict.seed_lineage;
  // offsets are relative to the start of the block section, in 8-byte units
  uint64_t off = 0;
  auto manifest_entry = [&off](const char* name, uint64_t rows, uint64_t cols, nlohmann::json& m) {
    m["tensors"][name] = {{"offset", off}, {"rows", rows}, {"cols", cols}};
    off += rows * cols;
  };
  manifest_entry("w_enc", dict.k, dict.d_enc, meta);
  manifest_entry("b_enc", dict.k, 1, meta);
  manifest_entry("w_dec", dict.d_dec, dict.k, meta);
  manifest_entry("b_dec", dict.d_dec, 1, meta);

  std::ofstream os(path, std::ios::binary);
  require(bool(os), ErrorKind::format, "cannot open " + path + " for writing");
  write_header(os, kDictMagic, {kFormatVersion, 0, 0});
  std::string js = meta.dump();
  write_u64(os, js.size());
  os.write(js.data(), std::streamsize(js.size()));
  write_block(os, dict.w_enc);
  write_block(os, dict.b_enc);
  write_block(os, dict.w_dec);
  write_block(os, dict.b_dec);
  require(bool(os), ErrorKind::format, "write failed for " + path);
}

Dictionary load_dictionary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), ErrorKind::format, "cannot open " + path);
  read_header(is, kDictMagic, "dictionary checkpoint");
  uint64_t js_len = read_u64(is);
  std::string js(js_len, '\0');
  is.read(js.data(), std::streamsize(js_len));
  require(bool(is), ErrorKind::format, "truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::format, std::string("metadata is not valid JSON: ") + e.what());
  }
  Dictionary d;
  try {
    d.d_enc = meta.at("d_enc").get<int>();
    d.d_dec = meta.at("d_dec").get<int>();
    d.k = meta.at("k").get<int>();
    std::string kind = meta.at("sparsifier").at("kind").get<std::string>();
    d.sparsifier.kind = kind == "relu" ? SparsifierKind::relu : SparsifierKind::topk;
    d.sparsifier.k_active = meta.at("sparsifier").at("k_active").get<int>();
    std::string tag = meta.at("kind_tag").get<std::string>();
    d.kind_tag = tag == "sae" ? DictionaryKind::sae : DictionaryKind::transcoder;
    d.seed_lineage = meta.at("seed_lineage").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("metadata missing fields: ") + e.what());
  }
  d.w_enc = read_block(is, d.k, d.d_enc);
  d.b_enc = read_block(is, d.k, 1);
  d.w_dec = read_block(is, d.d_dec, d.k);
  d.b_dec = read_block(is, d.d_dec, 1);
  d.validate();
  return d;
}

void save_activations(const std::string& path, const ActivationBatch& batch) {
  batch.validate();
  std::ofstream os(path, std::ios::binary);
  require(bool(os), ErrorKind::format, "cannot open " + path + " for writing");
  write_header(os, kBatchMagic, {kFormatVersion, uint8_t(batch.target ? 1 : 0), 0});
  write_u64(os, uint64_t(batch.data.rows()));
  write_u64(os, uint64_t(batch.data.cols()));
  write_block(os, batch.data);
  if (batch.target) {
    write_u64(os, uint64_t(batch.target->cols()));
    write_block(os, *batch.target);
  }
  require(bool(os), ErrorKind::format, "write failed for " + path);
}

ActivationBatch load_activations(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), ErrorKind::format, "cannot open " + path);
  Header h = read_header(is, kBatchMagic, "activation");
  require(h.content == 0, ErrorKind::format, "file holds a second moment, not activations");
  uint64_t n = read_u64(is), d = read_u64(is);
  require(n >= 1 && d >= 1 && n < (1ull << 32) && d < (1ull << 24), ErrorKind::format,
          "implausible batch dimensions");
  ActivationBatch b;
  b.data = read_block(is, n, d);
  if (h.has_target) {
    uint64_t dt = read_u64(is);
    require(dt >= 1 && dt < (1ull << 24), ErrorKind::format, "implausible target width");
    b.target = read_block(is, n, dt);
  }
  b.validate();
  return b;
}

void save_second_moment(const std::string& path, const SecondMoment& m) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), ErrorKind::format, "cannot open " + path + " for writing");
  write_header(os, kBatchMagic, {kFormatVersion, 0, 1});
  write_u64(os, uint64_t(m.dim));
  write_u64(os, uint64_t(m.dim));
  write_block(os, m.matrix);
  require(bool(os), ErrorKind::format, "write failed for " + path);
}

bool file_holds_second_moment(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), ErrorKind::format, "cannot open " + path);
  return read_header(is, kBatchMagic, "activation").content == 1;
}

SecondMoment load_second_moment(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), ErrorKind::format, "cannot open " + path);
  Header h = read_header(is, kBatchMagic, "activation");
  require(h.content == 1, ErrorKind::format, "file holds activations, not a second moment");
  uint64_t n = read_u64(is), d = read_u64(is);
  require(n == d && d >= 1 && d < (1ull << 24), ErrorKind::format, "implausible moment dimensions");
  return make_second_moment(read_block(is, n, d));
}

}  // namespace gae
