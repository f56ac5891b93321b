#ifndef WEAKVOC_EMBEDDINGS_HPP
#define WEAKVOC_EMBEDDINGS_HPP

#include <random>
#include <string>

#include "weakvoc/synthdata.hpp"
#include "weakvoc/tensor.hpp"

namespace weakvoc::embed {

enum class EmbeddingMode { attribute, trained };

const char* mode_name(EmbeddingMode mode);
EmbeddingMode parse_mode(const std::string& name);

/// Classifier weights, one row per class. Logits are
/// temperature · (normalize(row) · normalize(feature)).
struct ClassEmbeddingMatrix {
  Tensor weights;  // |C| × D
  EmbeddingMode mode = EmbeddingMode::attribute;
  double temperature = 10.0;

  Index dim() const { return weights.dim(1); }
  int num_classes() const { return static_cast<int>(weights.dim(0)); }
  bool trainable() const { return mode == EmbeddingMode::trained; }
};

/// Row(class) = [onehot(shape), onehot(color)] / √2, D = |shapes| + |colors|.
/// Built from the vocabulary alone, so novel rows need no detection data.
ClassEmbeddingMatrix attribute_embeddings(const data::Vocabulary& vocab, double temperature = 10.0);

/// Rows drawn from N(0, 1/D); optimised with the detector.
ClassEmbeddingMatrix trained_embeddings(const data::Vocabulary& vocab, Index dim, std::mt19937_64& rng,
                                        double temperature = 10.0);

/// Caption vector: normalized mean of the attribute rows of the classes the
/// caption mentions. A constant; no gradient flows into it.
Eigen::VectorXd embed_caption(const std::string& caption, const data::Vocabulary& vocab);

}  // namespace weakvoc::embed

#endif  // WEAKVOC_EMBEDDINGS_HPP
