#ifndef DCAPS_KFOLD_HPP_
#define DCAPS_KFOLD_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace dcaps {

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified k-fold over groups: all records sharing a group_id land in the
// same fold, and each class's groups are spread across folds within one group
// of the stratified ideal. Deterministic in `seed`.
//
// Preconditions: labels/group_ids parallel and nonempty, every group
// single-class, 2 <= k <= smallest per-class group count.
std::vector<FoldSplit> stratified_group_kfold(const std::vector<int>& labels,
                                              const std::vector<std::string>& group_ids,
                                              std::size_t k, std::uint64_t seed);

}  // namespace dcaps

#endif  // DCAPS_KFOLD_HPP_
