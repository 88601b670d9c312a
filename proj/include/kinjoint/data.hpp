#pragma once

// Dataset ingestion and the three rebalanced pair-set protocols.
//
// A manifest lists one parent and one child image per (kin type, family).
// Folds split families, never images, so train and test folds share no
// family. The generators are pure functions of (manifest, fold split, seed).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinjoint/rng.hpp"
#include "kinjoint/types.hpp"

namespace kinjoint {

enum class Protocol { Independent, Mixed, Real };

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Independent: return "independent";
    case Protocol::Mixed: return "mixed";
    case Protocol::Real: return "real";
  }
  return "?";
}

inline Protocol protocol_from_name(const std::string& name) {
  if (name == "independent") return Protocol::Independent;
  if (name == "mixed") return Protocol::Mixed;
  if (name == "real") return Protocol::Real;
  throw std::runtime_error("unknown protocol '" + name + "'");
}

struct ManifestRecord {
  std::string image_id;
  std::string path;  // relative to the manifest's base_dir
  KinType kin_type;
  int family_index = 0;
  char role = 'p';  // 'p' parent, 'c' child
};

struct Manifest {
  std::string dataset_name;
  std::string base_dir;
  std::vector<ManifestRecord> records;

  // (type code, family) -> record indices
  std::map<std::pair<int, int>, int> parent_of;
  std::map<std::pair<int, int>, int> child_of;

  void rebuild_index() {
    parent_of.clear();
    child_of.clear();
    std::set<std::string> ids;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const ManifestRecord& r = records[i];
      if (!ids.insert(r.image_id).second)
        throw std::runtime_error("manifest: duplicate image_id '" +
                                 r.image_id + "'");
      auto key = std::make_pair(r.kin_type.code, r.family_index);
      auto& slot = r.role == 'p' ? parent_of : child_of;
      if (!slot.emplace(key, static_cast<int>(i)).second)
        throw std::runtime_error(
            "manifest: family " + std::string(r.kin_type.name()) + "/" +
            std::to_string(r.family_index) + " has more than one " +
            (r.role == 'p' ? "parent" : "child"));
    }
    if (parent_of.size() != child_of.size())
      throw std::runtime_error("manifest: unpaired family records");
    for (const auto& [key, idx] : parent_of)
      if (!child_of.count(key))
        throw std::runtime_error("manifest: family " + std::to_string(key.first) +
                                 "/" + std::to_string(key.second) +
                                 " has a parent but no child");
  }

  // Families of one kin type, ascending family index.
  std::vector<int> families_of(KinType kin) const {
    std::vector<int> out;
    for (const auto& [key, idx] : parent_of)
      if (key.first == kin.code) out.push_back(key.second);
    return out;  // map iteration is already ordered
  }

  int parent_record(KinType kin, int family) const {
    auto it = parent_of.find({kin.code, family});
    if (it == parent_of.end())
      throw std::runtime_error("manifest: no such family");
    return it->second;
  }
  int child_record(KinType kin, int family) const {
    auto it = child_of.find({kin.code, family});
    if (it == child_of.end())
      throw std::runtime_error("manifest: no such family");
    return it->second;
  }
};

inline std::string dirname_of(const std::string& path) {
  const std::size_t pos = path.find_last_of('/');
  return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

// Manifest CSV columns: image_id,path,kin_type,family_index,role.
inline Manifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("manifest: cannot open " + path);
  Manifest m;
  m.base_dir = dirname_of(path);
  std::string line;
  int row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (row == 1 && line.rfind("image_id,", 0) == 0) continue;  // header
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 5)
      throw std::runtime_error("manifest: row " + std::to_string(row) +
                               " has " + std::to_string(cols.size()) +
                               " columns, expected 5");
    ManifestRecord r;
    r.image_id = cols[0];
    r.path = cols[1];
    try {
      r.kin_type = kin_type_from_name(cols[2]);
      r.family_index = std::stoi(cols[3]);
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest: row " + std::to_string(row) + ": " +
                               e.what());
    }
    if (cols[4] != "p" && cols[4] != "c")
      throw std::runtime_error("manifest: row " + std::to_string(row) +
                               ": role must be 'p' or 'c', got '" + cols[4] +
                               "'");
    r.role = cols[4][0];
    m.records.push_back(std::move(r));
  }
  if (m.records.empty())
    throw std::runtime_error("manifest: no records in " + path);
  m.rebuild_index();
  return m;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("manifest: cannot write " + path);
  os << "image_id,path,kin_type,family_index,role\n";
  for (const ManifestRecord& r : m.records)
    os << r.image_id << ',' << r.path << ',' << r.kin_type.name() << ','
       << r.family_index << ',' << r.role << '\n';
  if (!os) throw std::runtime_error("manifest: write failed for " + path);
}

// Convenience scanner for the conventional per-type folder layout:
// <dir>/<type>/<type>_<index>_<1|2>.<ext>, suffix 1 = parent, 2 = child.
// Files that do not match the pattern are ignored.
inline Manifest scan_kinfacew_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  Manifest m;
  m.dataset_name = fs::path(dir).filename().string();
  m.base_dir = dir;
  for (KinType kin : all_kin_types()) {
    const fs::path type_dir = fs::path(dir) / kin.name();
    if (!fs::exists(type_dir)) continue;
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(type_dir))
      if (entry.is_regular_file())
        names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    const std::string prefix = std::string(kin.name()) + "_";
    for (const std::string& name : names) {
      if (name.rfind(prefix, 0) != 0) continue;
      const std::size_t dot = name.find_last_of('.');
      if (dot == std::string::npos) continue;
      const std::string stem = name.substr(0, dot);
      const std::size_t us = stem.find_last_of('_');
      if (us == std::string::npos || us + 2 != stem.size()) continue;
      const char suffix = stem[us + 1];
      if (suffix != '1' && suffix != '2') continue;
      int family = 0;
      try {
        family = std::stoi(stem.substr(prefix.size(), us - prefix.size()));
      } catch (const std::exception&) {
        continue;
      }
      ManifestRecord r;
      r.image_id = stem;
      r.path = std::string(kin.name()) + "/" + name;
      r.kin_type = kin;
      r.family_index = family;
      r.role = suffix == '1' ? 'p' : 'c';
      m.records.push_back(std::move(r));
    }
  }
  if (m.records.empty())
    throw std::runtime_error("scan: no kinship images found under " + dir);
  m.rebuild_index();
  return m;
}

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

struct FoldSplit {
  int k = 5;
  std::map<std::pair<int, int>, int> fold_of;  // (type code, family) -> fold

  int fold(KinType kin, int family) const {
    auto it = fold_of.find({kin.code, family});
    if (it == fold_of.end())
      throw std::runtime_error("fold split: unknown family");
    return it->second;
  }

  // Families of one type in the given fold (test) or outside it (train).
  std::vector<int> select(KinType kin, int fold_index, bool train) const {
    std::vector<int> out;
    for (const auto& [key, f] : fold_of)
      if (key.first == kin.code && ((f == fold_index) != train))
        out.push_back(key.second);
    return out;
  }
};

// Seeded family-level split, balanced per kin type to within one family.
inline FoldSplit make_folds(const Manifest& m, int k = 5,
                            std::uint64_t seed = 0) {
  if (k < 2) throw std::runtime_error("make_folds: k must be at least 2");
  FoldSplit split;
  split.k = k;
  for (KinType kin : all_kin_types()) {
    std::vector<int> fams = m.families_of(kin);
    if (static_cast<int>(fams.size()) < k)
      throw std::runtime_error("make_folds: kin type " +
                               std::string(kin.name()) + " has " +
                               std::to_string(fams.size()) +
                               " families, need at least " + std::to_string(k));
    Rng rng(mix_seed(seed, 0xF01D5, static_cast<std::uint64_t>(kin.code)));
    rng.shuffle(fams);
    for (std::size_t i = 0; i < fams.size(); ++i)
      split.fold_of[{kin.code, fams[i]}] = static_cast<int>(i % k);
  }
  return split;
}

// ---------------------------------------------------------------------------
// pair samples and the three protocols
// ---------------------------------------------------------------------------

struct PairSample {
  int parent_record = -1;  // index into manifest.records
  int child_record = -1;
  int label = 0;  // 0 negative, 1..4 kin type
  Protocol protocol = Protocol::Mixed;
};

namespace detail {

// Seeded derangement: a permutation with no fixed point. For n = 2 the swap
// is the only one.
inline std::vector<int> derangement(int n, Rng& rng) {
  if (n < 2)
    throw std::runtime_error("derangement: need at least 2 elements");
  std::vector<int> perm(n);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    for (int i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    bool ok = true;
    for (int i = 0; i < n; ++i)
      if (perm[i] == i) {
        ok = false;
        break;
      }
    if (ok) return perm;
  }
  throw std::runtime_error("derangement: failed to generate");  // unreachable
}

}  // namespace detail

// Independent kin-type set: every true pair of the requested type plus an
// equal count of derangement negatives from the same type pool (1:1).
inline std::vector<PairSample> gen_independent_set(const Manifest& m,
                                                   const FoldSplit& split,
                                                   int fold, bool train,
                                                   KinType kin,
                                                   std::uint64_t seed) {
  std::vector<int> fams = split.select(kin, fold, train);
  if (fams.size() < 2)
    throw std::runtime_error(
        "gen_independent_set: need at least 2 families to build negatives, "
        "got " +
        std::to_string(fams.size()));
  std::vector<PairSample> out;
  for (int f : fams)
    out.push_back({m.parent_record(kin, f), m.child_record(kin, f), kin.code,
                   Protocol::Independent});
  Rng rng(mix_seed(seed, 0x1DE9, static_cast<std::uint64_t>(kin.code) * 31 +
                                     static_cast<std::uint64_t>(fold)));
  std::vector<int> perm =
      detail::derangement(static_cast<int>(fams.size()), rng);
  for (std::size_t i = 0; i < fams.size(); ++i)
    out.push_back({m.parent_record(kin, fams[i]),
                   m.child_record(kin, fams[perm[i]]), 0,
                   Protocol::Independent});
  return out;
}

// Mixed kin-type set: all positives of every type plus, per type, an equal
// count of non-kin parent-child pairs drawn without replacement from that
// type's pools. Class histogram is [sum(N_t), N_1, N_2, N_3, N_4], overall
// positive:negative 1:1.
inline std::vector<PairSample> gen_mixed_set(const Manifest& m,
                                             const FoldSplit& split, int fold,
                                             bool train, std::uint64_t seed) {
  std::vector<PairSample> out;
  for (KinType kin : all_kin_types()) {
    std::vector<int> fams = split.select(kin, fold, train);
    if (fams.empty())
      throw std::runtime_error("gen_mixed_set: kin type " +
                               std::string(kin.name()) +
                               " has no families in this selection");
    for (int f : fams)
      out.push_back({m.parent_record(kin, f), m.child_record(kin, f), kin.code,
                     Protocol::Mixed});
  }
  for (KinType kin : all_kin_types()) {
    std::vector<int> fams = split.select(kin, fold, train);
    const int n = static_cast<int>(fams.size());
    const std::int64_t candidates =
        static_cast<std::int64_t>(n) * (n - 1);
    if (candidates < n)
      throw std::runtime_error(
          "gen_mixed_set: kin type " + std::string(kin.name()) + " has only " +
          std::to_string(candidates) + " non-kin combinations for " +
          std::to_string(n) + " negatives");
    std::vector<std::pair<int, int>> combos;
    combos.reserve(static_cast<std::size_t>(candidates));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) combos.emplace_back(i, j);
    Rng rng(mix_seed(seed, 0x3A1C, static_cast<std::uint64_t>(kin.code) * 131 +
                                       static_cast<std::uint64_t>(fold)));
    rng.shuffle(combos);
    for (int i = 0; i < n; ++i)
      out.push_back({m.parent_record(kin, fams[combos[i].first]),
                     m.child_record(kin, fams[combos[i].second]), 0,
                     Protocol::Mixed});
  }
  return out;
}

// Real-scenario set: every unordered pair of the fold's images, C(2P,2)
// samples of which exactly P are positive. Parent-role images take the
// parent slot; for same-role pairs the lexicographically smaller image_id
// does.
inline std::vector<PairSample> gen_real_scenario_set(const Manifest& m,
                                                     const FoldSplit& split,
                                                     int fold,
                                                     bool train = false) {
  std::vector<int> recs;
  for (KinType kin : all_kin_types())
    for (int f : split.select(kin, fold, train)) {
      recs.push_back(m.parent_record(kin, f));
      recs.push_back(m.child_record(kin, f));
    }
  if (recs.empty())
    throw std::runtime_error("gen_real_scenario_set: empty fold");
  std::sort(recs.begin(), recs.end(), [&](int a, int b) {
    return m.records[a].image_id < m.records[b].image_id;
  });
  std::vector<PairSample> out;
  out.reserve(recs.size() * (recs.size() - 1) / 2);
  for (std::size_t i = 0; i < recs.size(); ++i)
    for (std::size_t j = i + 1; j < recs.size(); ++j) {
      const ManifestRecord& a = m.records[recs[i]];
      const ManifestRecord& b = m.records[recs[j]];
      int label = 0;
      if (a.kin_type == b.kin_type && a.family_index == b.family_index &&
          a.role != b.role)
        label = a.kin_type.code;
      int parent_rec = recs[i], child_rec = recs[j];
      if (a.role != b.role) {
        // roles decide the slots
        if (a.role == 'c') std::swap(parent_rec, child_rec);
      }
      // same-role pairs keep image_id order: i precedes j already
      out.push_back({parent_rec, child_rec, label, Protocol::Real});
    }
  return out;
}

// Family-level train/test disjointness of a sample list against a fold.
inline bool fold_disjoint(const Manifest& m, const FoldSplit& split,
                          const std::vector<PairSample>& train_samples,
                          int test_fold) {
  for (const PairSample& s : train_samples)
    for (int rec : {s.parent_record, s.child_record}) {
      const ManifestRecord& r = m.records[rec];
      if (split.fold(r.kin_type, r.family_index) == test_fold) return false;
    }
  return true;
}

}  // namespace kinjoint
