#ifndef DNDM_BATCHING_H_
#define DNDM_BATCHING_H_

#include <cstdint>
#include <vector>

#include "dndm/dataset.h"
#include "dndm/tensor.h"

namespace dndm {

struct Batch {
  Tensor pixels;   // B x feature_dim
  Tensor one_hot;  // B x num_classes
  std::vector<int> labels;
  std::vector<int> bias_labels;
  std::vector<uint8_t> aligned;
  std::vector<size_t> indices;  // positions in the source dataset

  size_t size() const { return labels.size(); }
};

// Gathers the given examples into a batch.
Batch MakeBatch(const BiasedDataset& dataset, std::span<const size_t> indices);

// One epoch of minibatches over a seeded permutation of the dataset. Every
// example appears exactly once; the last batch may be short.
class BatchSampler {
 public:
  BatchSampler(const BiasedDataset& dataset, size_t batch_size, uint64_t epoch_seed);

  size_t num_batches() const;
  Batch batch(size_t i) const;
  const std::vector<size_t>& order() const { return order_; }

 private:
  const BiasedDataset* dataset_;
  size_t batch_size_;
  std::vector<size_t> order_;
};

}  // namespace dndm

#endif  // DNDM_BATCHING_H_
