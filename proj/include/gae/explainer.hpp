// Dictionary-based explainer: encode/reconstruct passes and serialization.
#pragma once

#include "gae/spectral.hpp"

#include <optional>

namespace gae {

enum class SparsifierKind { relu, topk };

struct SparsifierSpec {
  SparsifierKind kind = SparsifierKind::relu;
  int k_active = 0;  // topk only
};

// sae: encoder input and reconstruction target are the same stream.
// transcoder: encoder reads one stream, decoder reconstructs the paired one.
enum class DictionaryKind { sae, transcoder };

struct Dictionary {
  int d_enc = 0;  // encoder input width
  int d_dec = 0;  // reconstruction width
  int k = 0;      // dictionary size
  Mat w_enc;      // k x d_enc
  Vec b_enc;      // k
  Mat w_dec;      // d_dec x k
  Vec b_dec;      // d_dec
  SparsifierSpec sparsifier;
  DictionaryKind kind_tag = DictionaryKind::sae;
  uint64_t seed_lineage = 0;

  int d() const { return d_dec; }
  void validate() const;
};

// n rows of activations; optional paired target of possibly different width
// (transcoder input -> output reconstruction).
struct ActivationBatch {
  Mat data;                  // n x d
  std::optional<Mat> target; // n x d_t

  int n() const { return int(data.rows()); }
  int d() const { return int(data.cols()); }
  const Mat& reconstruction_target() const { return target ? *target : data; }
  void validate() const;
};

Vec encode(const Dictionary& dict, const Vec& h);
Mat encode_batch(const Dictionary& dict, const Mat& rows);  // n x k

Vec reconstruct(const Dictionary& dict, const Vec& z);

Vec forward(const Dictionary& dict, const Vec& h);

// mean squared 2-norm residual against the reconstruction target
// (the batch itself for sae, the paired target stream for transcoder)
double batch_reconstruction_error(const Dictionary& dict, const ActivationBatch& batch);

void save_dictionary(const std::string& path, const Dictionary& dict);
Dictionary load_dictionary(const std::string& path);

void save_activations(const std::string& path, const ActivationBatch& batch);
ActivationBatch load_activations(const std::string& path);

// Second moments travel in the same container, flagged in the header.
void save_second_moment(const std::string& path, const SecondMoment& m);
bool file_holds_second_moment(const std::string& path);
SecondMoment load_second_moment(const std::string& path);

}  // namespace gae
