#pragma once

// Shared domain vocabulary: the four kin types and the five identification
// classes. Class labels are {0 = negative, 1 = F-D, 2 = F-S, 3 = M-D,
// 4 = M-S}; kin-type codes coincide with the nonzero labels.

#include <array>
#include <stdexcept>
#include <string>

namespace kinjoint {

inline constexpr int kNumKinTypes = 4;
inline constexpr int kNumClasses = 5;

struct KinType {
  int code = 0;  // 1..4

  KinType() = default;
  explicit KinType(int c) : code(c) {
    if (c < 1 || c > kNumKinTypes)
      throw std::runtime_error("KinType: code " + std::to_string(c) +
                               " outside 1..4");
  }

  // Short names used in manifests and report columns.
  const char* name() const {
    static constexpr std::array<const char*, 4> names{"fd", "fs", "md", "ms"};
    return names[code - 1];
  }

  const char* long_name() const {
    static constexpr std::array<const char*, 4> names{
        "father-daughter", "father-son", "mother-daughter", "mother-son"};
    return names[code - 1];
  }

  bool operator==(const KinType& other) const { return code == other.code; }
};

inline KinType kin_type_from_name(const std::string& name) {
  if (name == "fd") return KinType(1);
  if (name == "fs") return KinType(2);
  if (name == "md") return KinType(3);
  if (name == "ms") return KinType(4);
  throw std::runtime_error("unknown kin type '" + name +
                           "' (expected fd, fs, md or ms)");
}

inline std::array<KinType, 4> all_kin_types() {
  return {KinType(1), KinType(2), KinType(3), KinType(4)};
}

inline void check_class_label(int label) {
  if (label < 0 || label >= kNumClasses)
    throw std::runtime_error("class label " + std::to_string(label) +
                             " outside 0..4");
}

}  // namespace kinjoint
