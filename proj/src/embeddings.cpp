#include "weakvoc/embeddings.hpp"

#include <cmath>

namespace weakvoc::embed {

const char* mode_name(EmbeddingMode mode) { return mode == EmbeddingMode::attribute ? "attribute" : "trained"; }

EmbeddingMode parse_mode(const std::string& name) {
  if (name == "attribute") return EmbeddingMode::attribute;
  if (name == "trained") return EmbeddingMode::trained;
  throw ConfigError("unknown embedding mode '" + name + "' (expected attribute|trained)");
}

ClassEmbeddingMatrix attribute_embeddings(const data::Vocabulary& vocab, double temperature) {
  const Index S = static_cast<Index>(vocab.shapes.size());
  const Index K = static_cast<Index>(vocab.colors.size());
  ClassEmbeddingMatrix m;
  m.mode = EmbeddingMode::attribute;
  m.temperature = temperature;
  m.weights = Tensor(Shape{vocab.num_classes(), S + K}, 0.0);
  auto W = m.weights.matrix();
  const double v = 1.0 / std::sqrt(2.0);
  for (int id = 0; id < vocab.num_classes(); ++id) {
    W(id, vocab.shape_of(id)) = v;
    W(id, S + vocab.color_of(id)) = v;
  }
  return m;
}

ClassEmbeddingMatrix trained_embeddings(const data::Vocabulary& vocab, Index dim, std::mt19937_64& rng,
                                        double temperature) {
  if (dim < 1) throw ConfigError("trained embedding dimension must be >= 1");
  ClassEmbeddingMatrix m;
  m.mode = EmbeddingMode::trained;
  m.temperature = temperature;
  m.weights = Tensor(Shape{vocab.num_classes(), dim});
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  for (Index i = 0; i < m.weights.size(); ++i) m.weights[i] = n(rng);
  return m;
}

Eigen::VectorXd embed_caption(const std::string& caption, const data::Vocabulary& vocab) {
  const auto classes = data::parse_caption(caption, vocab);
  if (classes.empty()) throw ValidationError("caption matches no vocabulary class: '" + caption + "'");
  const auto table = attribute_embeddings(vocab);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(table.dim());
  for (int c : classes) v += table.weights.matrix().row(c).transpose();
  v /= static_cast<double>(classes.size());
  return v / std::max(v.norm(), 1e-12);
}

}  // namespace weakvoc::embed
