#include "dndm/batching.h"

#include <algorithm>
#include <numeric>

#include "dndm/errors.h"
#include "dndm/graph.h"
#include "dndm/random.h"

namespace dndm {

Batch MakeBatch(const BiasedDataset& dataset, std::span<const size_t> indices) {
  if (indices.empty()) throw ValidationError("cannot build an empty batch");
  const size_t rows = indices.size();
  const size_t dim = dataset.feature_dim();
  Batch batch;
  batch.pixels = Tensor({rows, dim});
  batch.indices.assign(indices.begin(), indices.end());
  for (size_t r = 0; r < rows; ++r) {
    const BiasedExample ex = dataset.example(indices[r]);
    std::copy(ex.pixels.begin(), ex.pixels.end(), batch.pixels.row(r).begin());
    batch.labels.push_back(ex.label);
    batch.bias_labels.push_back(ex.bias_label);
    batch.aligned.push_back(ex.aligned() ? 1 : 0);
  }
  batch.one_hot = OneHot(batch.labels, dataset.num_classes());
  return batch;
}

BatchSampler::BatchSampler(const BiasedDataset& dataset, size_t batch_size,
                           uint64_t epoch_seed)
    : dataset_(&dataset), batch_size_(batch_size), order_(dataset.size()) {
  if (batch_size == 0) throw ValidationError("batch size must be >= 1");
  if (dataset.empty()) throw DataError("cannot iterate an empty dataset");
  std::iota(order_.begin(), order_.end(), size_t{0});
  Rng rng = MakeRng(epoch_seed, "batches");
  std::shuffle(order_.begin(), order_.end(), rng);
}

size_t BatchSampler::num_batches() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

Batch BatchSampler::batch(size_t i) const {
  const size_t begin = i * batch_size_;
  if (begin >= order_.size()) throw ValidationError("batch index out of range");
  const size_t end = std::min(order_.size(), begin + batch_size_);
  return MakeBatch(*dataset_,
                   std::span<const size_t>(order_).subspan(begin, end - begin));
}

}  // namespace dndm
