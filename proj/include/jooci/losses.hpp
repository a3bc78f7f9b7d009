#pragma once

// Loss terms. The Content loss touches only Content-side parameters (plus the
// Shared encoder); the Other and regularizer losses touch only Other-side
// parameters (plus the Shared encoder). Stop-gradient on the content taps and
// the separate clean Content pass make that separation exact.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "jooci/model.hpp"
#include "jooci/ops.hpp"

namespace jooci {

struct LossBreakdown {
  double cl = 0, ol = 0, rl = 0, total = 0;
  std::map<int, double> per_layer_mpl;  // content layer -> mpl
};

// Scalar combination cl + ol + rl / 10.
inline double total_loss(double cl, double ol, double rl) { return cl + ol + rl / 10.0; }

template <class T>
Tensor<T> total_loss(const Tensor<T>& cl, const Tensor<T>& ol, const Tensor<T>& rl) {
  return add(add(cl, ol), divide(rl, T(10)));
}

// Masked prediction: mean over selected rows of the cross-entropy of
// cos(A h_i, e_c) / tau against the row's label. states [N, D] (any leading
// shape), rows index states, labels[r] is the target of rows[r].
template <class T>
Tensor<T> mpl(const Tensor<T>& states, const std::vector<std::size_t>& rows, const std::vector<int>& labels,
              const Linear<T>& proj, const Tensor<T>& codewords, T tau) {
  if (rows.empty()) throw std::invalid_argument("mpl: empty mask set");
  if (tau <= T(0)) throw std::invalid_argument("mpl: tau must be positive");
  if (rows.size() != labels.size()) throw std::invalid_argument("mpl: rows/labels length mismatch");
  auto z = proj(gather_rows(states, rows));
  return cross_entropy(divide(cosine_matrix(z, codewords), tau), labels);
}

// Rows of a [B,T,*] tensor that are masked and carry a valid label.
inline std::vector<std::size_t> masked_rows(const std::vector<std::uint8_t>& mask, const std::vector<int>& labels) {
  if (mask.size() != labels.size()) throw std::invalid_argument("masked_rows: mask/labels length mismatch");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] && labels[i] >= 0) rows.push_back(i);
  return rows;
}

// Sum of mpl over label sets; set s supervises content layer `layers[s]`
// with `labels[s]` (B*T entries, -1 = no label).
template <class T>
Tensor<T> mmpl(const std::vector<Tensor<T>>& content_layers, const std::vector<std::uint8_t>& mask,
               const JoociModel<T>& model, const std::vector<std::vector<int>>& labels,
               std::map<int, double>* per_layer = nullptr) {
  const auto& layers = model.label_layers();
  if (labels.size() != layers.size())
    throw std::invalid_argument("mmpl: " + std::to_string(labels.size()) + " label sets for " +
                                std::to_string(layers.size()) + " dictionary entries");
  Tensor<T> total;
  for (std::size_t s = 0; s < layers.size(); ++s) {
    const auto rows = masked_rows(mask, labels[s]);
    std::vector<int> targets;
    targets.reserve(rows.size());
    for (auto r : rows) targets.push_back(labels[s][r]);
    const auto& head = model.heads()[s];
    auto term = mpl(content_layers.at(static_cast<std::size_t>(layers[s])), rows, targets, head.proj, head.codewords,
                    static_cast<T>(model.config().tau));
    if (per_layer) (*per_layer)[layers[s]] += static_cast<double>(term.item());
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// Mean over the batch of 1 - cos(student_b, teacher_b). The teacher is a
// constant.
template <class T>
Tensor<T> other_loss(const Tensor<T>& student, const Tensor<T>& teacher) {
  if (student.rank() == 1) return sub(Tensor<T>::scalar(T(1)), cosine_similarity(student, teacher));
  return sub(Tensor<T>::scalar(T(1)), mean(rowwise_cosine(student, teacher)));
}

// Mean per-frame cross-entropy; label -1 marks padding.
template <class T>
Tensor<T> regularizer_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, labels);
}

}  // namespace jooci
