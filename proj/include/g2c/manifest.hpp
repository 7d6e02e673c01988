#pragma once

// Corpus index: one line per patch. Metadata lines start with '#'; records are
// `path stain_id label split patient_group` with "-" as the label of
// unlabeled reference patches.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "g2c/tensor.hpp"

namespace g2c {

struct PatchRecord {
  std::string image_path;
  int stain_id = 0;
  std::string class_label;  // "noa" | "gs" | "ss" | "-"
  std::string split;        // "train" | "test" | "reference"
  int patient_group = 0;
};

struct Manifest {
  std::vector<PatchRecord> records;
  std::uint64_t corpus_seed = 0;
  std::string stain_version;

  std::vector<PatchRecord> split_records(const std::string& split) const {
    std::vector<PatchRecord> out;
    for (const auto& r : records)
      if (r.split == split) out.push_back(r);
    return out;
  }

  std::vector<PatchRecord> reference_records(int stain_id) const {
    std::vector<PatchRecord> out;
    for (const auto& r : records)
      if (r.split == "reference" && r.stain_id == stain_id) out.push_back(r);
    return out;
  }
};

inline bool is_known_label(const std::string& label) {
  return label == "noa" || label == "gs" || label == "ss";
}

inline void validate_record(const PatchRecord& r, const std::string& where) {
  check_arg(!r.image_path.empty(), where + ": empty path");
  check_arg(r.stain_id >= 0, where + ": negative stain id");
  check_arg(r.split == "train" || r.split == "test" || r.split == "reference",
            where + ": unknown split '" + r.split + "'");
  if (r.split == "reference")
    check_arg(r.class_label == "-", where + ": reference records are unlabeled, got '" +
                                        r.class_label + "'");
  else
    check_arg(is_known_label(r.class_label), where + ": unknown label '" + r.class_label + "'");
}

inline void validate_manifest(const Manifest& m) {
  std::set<int> train_patients, test_patients;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    validate_record(r, "record " + std::to_string(i + 1));
    if (r.split == "train") train_patients.insert(r.patient_group);
    if (r.split == "test") test_patients.insert(r.patient_group);
  }
  for (int p : train_patients)
    check_arg(!test_patients.count(p),
              "patient group " + std::to_string(p) + " appears in both train and test");
}

inline void write_manifest(const Manifest& m, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    check_state(static_cast<bool>(f), "cannot open manifest for writing: " + tmp);
    f << "# g2c-manifest v1\n";
    f << "# corpus_seed " << m.corpus_seed << "\n";
    f << "# stain_version " << m.stain_version << "\n";
    for (const auto& r : m.records)
      f << r.image_path << ' ' << r.stain_id << ' ' << r.class_label << ' ' << r.split << ' '
        << r.patient_group << '\n';
    check_state(static_cast<bool>(f), "manifest write failed: " + tmp);
  }
  check_state(std::rename(tmp.c_str(), path.c_str()) == 0, "rename failed: " + path);
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  check_state(static_cast<bool>(f), "cannot open manifest: " + path);
  Manifest m;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream is(line.substr(1));
      std::string key;
      is >> key;
      if (key == "corpus_seed") is >> m.corpus_seed;
      if (key == "stain_version") is >> m.stain_version;
      continue;
    }
    std::istringstream is(line);
    PatchRecord r;
    if (!(is >> r.image_path >> r.stain_id >> r.class_label >> r.split >> r.patient_group))
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": malformed record '" +
                                  line + "'");
    try {
      validate_record(r, "line " + std::to_string(line_no));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    m.records.push_back(std::move(r));
  }
  validate_manifest(m);
  return m;
}

}  // namespace g2c
