#include "dcaps/kfold.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "dcaps/errors.hpp"
#include "dcaps/rng.hpp"

namespace dcaps {

std::vector<FoldSplit> stratified_group_kfold(const std::vector<int>& labels,
                                              const std::vector<std::string>& group_ids,
                                              std::size_t k, std::uint64_t seed) {
  if (labels.size() != group_ids.size()) {
    throw ConfigError("stratified_group_kfold: labels and group_ids differ in length");
  }
  if (labels.empty()) throw ConfigError("stratified_group_kfold: empty input");
  if (k < 2) throw ConfigError("stratified_group_kfold: k must be >= 2");

  // group -> (label, record indices); reject mixed-label groups
  std::map<std::string, int> group_label;
  std::map<std::string, std::vector<std::size_t>> group_records;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = group_label.emplace(group_ids[i], labels[i]);
    if (!inserted && it->second != labels[i]) {
      throw ConfigError("group '" + group_ids[i] +
                        "' carries records with differing labels");
    }
    group_records[group_ids[i]].push_back(i);
  }

  // class -> sorted group list (std::map iteration gives a stable order)
  std::map<int, std::vector<std::string>> class_groups;
  for (const auto& [gid, label] : group_label) class_groups[label].push_back(gid);

  std::size_t min_count = group_label.size();
  for (const auto& [label, groups] : class_groups) {
    min_count = std::min(min_count, groups.size());
  }
  if (k > min_count) {
    std::ostringstream os;
    os << "stratified_group_kfold: k=" << k
       << " exceeds the smallest per-class group count (";
    bool first = true;
    for (const auto& [label, groups] : class_groups) {
      if (!first) os << ", ";
      os << "class " << label << ": " << groups.size() << " groups";
      first = false;
    }
    os << ")";
    throw ConfigError(os.str());
  }

  // Shuffle each class's groups, then deal round-robin. The offset carries
  // across classes so total fold sizes also stay balanced.
  Rng rng(seed);
  std::map<std::string, std::size_t> fold_of_group;
  std::size_t offset = 0;
  for (auto& [label, groups] : class_groups) {
    rng.shuffle(groups);
    for (std::size_t i = 0; i < groups.size(); ++i) {
      fold_of_group[groups[i]] = (offset + i) % k;
    }
    offset += groups.size();
  }

  std::vector<FoldSplit> folds(k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t f = fold_of_group.at(group_ids[i]);
    for (std::size_t j = 0; j < k; ++j) {
      (j == f ? folds[j].test : folds[j].train).push_back(i);
    }
  }
  return folds;
}

}  // namespace dcaps
