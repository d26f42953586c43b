#pragma once

// Manifest ingestion, label encoding, patient-level stratified splitting and
// the synthetic desk-scale dataset. Manifest CSV schema:
//   patient_id,abnormality_id,image_path,pathology
// Split file: one `patient<TAB>split` line per patient after a comment line
// `# seed=<int> fractions=0.70,0.15,0.15`.

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hybridroi/common.hpp"
#include "hybridroi/image.hpp"
#include "hybridroi/rng.hpp"

namespace hybridroi {

struct ManifestRecord {
  std::string patient_id;
  std::string abnormality_id;
  std::string image_path;  // relative to the dataset root
  std::string pathology;
  int label{0};  // 1 malignant, 0 benign
};

// MALIGNANT -> 1, BENIGN / BENIGN_WITHOUT_CALLBACK -> 0, case-insensitive
inline int encode_label(const std::string& pathology) {
  std::string up;
  up.reserve(pathology.size());
  for (char c : pathology) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (up == "MALIGNANT") return 1;
  if (up == "BENIGN" || up == "BENIGN_WITHOUT_CALLBACK") return 0;
  throw DataError("encode_label: unknown pathology string '" + pathology + "'");
}

// ---------------------------------------------------------------------------
// file discovery
// ---------------------------------------------------------------------------

struct ScanResult {
  std::vector<std::string> files;  // relative to root, lexicographically sorted
  std::vector<std::string> irregularities;
};

inline bool has_raster_extension(const std::string& path) {
  auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return false;
  std::string ext = path.substr(dot);
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".pgm" || ext == ".ppm";
}

inline ScanResult scan_images(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::exists(root) || !fs::is_directory(root))
    throw IoError("scan_images: missing or unreadable root " + root);
  ScanResult result;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), root).generic_string();
    if (!has_raster_extension(rel)) continue;
    std::error_code ec;
    const auto size = fs::file_size(entry.path(), ec);
    if (ec) {
      result.irregularities.push_back(rel + ": unreadable");
      continue;
    }
    if (size == 0) {
      result.irregularities.push_back(rel + ": zero-byte file");
      continue;
    }
    std::ifstream probe(entry.path(), std::ios::binary);
    if (!probe) {
      result.irregularities.push_back(rel + ": cannot open");
      continue;
    }
    result.files.push_back(rel);
  }
  std::sort(result.files.begin(), result.files.end());
  std::sort(result.irregularities.begin(), result.irregularities.end());
  return result;
}

// ---------------------------------------------------------------------------
// manifest CSV
// ---------------------------------------------------------------------------

struct CsvRow {
  std::string patient_id, abnormality_id, image_path, pathology;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::vector<CsvRow> read_manifest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ":1: empty manifest");
  {
    auto hdr = split_csv_line(line);
    const std::vector<std::string> want{"patient_id", "abnormality_id", "image_path", "pathology"};
    if (hdr != want)
      throw ParseError(path + ":1: bad header, expected patient_id,abnormality_id,image_path,pathology");
  }
  std::vector<CsvRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() != 4)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 4 fields, got " +
                       std::to_string(f.size()));
    rows.push_back({f[0], f[1], f[2], f[3]});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// manifest <-> file matching (inner join on image_path)
// ---------------------------------------------------------------------------

struct MatchResult {
  std::vector<ManifestRecord> records;
  int64_t excluded_no_file{0};   // row without a scanned file
  int64_t excluded_no_row{0};    // scanned file without a row
  int64_t excluded_ambiguous{0}; // duplicate rows for one identifier
  int64_t excluded_total() const {
    return excluded_no_file + excluded_no_row + excluded_ambiguous;
  }
};

inline MatchResult match_manifest(const std::vector<CsvRow>& rows,
                                  const std::vector<std::string>& files) {
  std::unordered_set<std::string> file_set(files.begin(), files.end());
  MatchResult out;
  std::unordered_map<std::string, size_t> first_row_for;  // image_path -> records index
  std::unordered_set<std::string> matched_files;
  for (const auto& row : rows) {
    const int label = encode_label(row.pathology);
    auto it = first_row_for.find(row.image_path);
    if (it != first_row_for.end()) {
      if (out.records[it->second].label != label)
        throw DataError("match_manifest: identifier '" + row.image_path +
                        "' maps to conflicting labels");
      ++out.excluded_ambiguous;  // exact duplicate, keep the first
      continue;
    }
    if (!file_set.count(row.image_path)) {
      ++out.excluded_no_file;
      continue;
    }
    first_row_for[row.image_path] = out.records.size();
    matched_files.insert(row.image_path);
    out.records.push_back({row.patient_id, row.abnormality_id, row.image_path, row.pathology, label});
  }
  for (const auto& f : files)
    if (!matched_files.count(f)) ++out.excluded_no_row;
  return out;
}

// ---------------------------------------------------------------------------
// patient-level stratified split
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

struct SplitAssignment {
  std::map<std::string, std::string> by_patient;  // ordered, for stable output
  uint64_t seed{0};
  std::array<double, 3> fractions{0.70, 0.15, 0.15};

  const std::string& of(const std::string& patient) const {
    auto it = by_patient.find(patient);
    check(it != by_patient.end(), "split: unknown patient " + patient);
    return it->second;
  }
};

// Greedy deficit assignment: group records by patient, label each patient by
// its majority class (ties go malignant), shuffle patients with the seeded
// rng, then hand each patient to the split with the largest remaining
// (fraction x class) deficit. Ties break in train/val/test order.
inline SplitAssignment stratified_split(const std::vector<ManifestRecord>& records,
                                        std::array<double, 3> fractions, uint64_t seed) {
  check(std::fabs(fractions[0] + fractions[1] + fractions[2] - 1.0) < 1e-9,
        "stratified_split: fractions must sum to 1");
  std::map<std::string, std::pair<int64_t, int64_t>> patient_counts;  // id -> (neg, pos)
  for (const auto& r : records) {
    auto& c = patient_counts[r.patient_id];
    (r.label == 1 ? c.second : c.first) += 1;
  }
  check(patient_counts.size() >= 3, "stratified_split: fewer patients than splits");

  std::vector<std::pair<std::string, int>> patients;  // (id, majority label)
  patients.reserve(patient_counts.size());
  for (const auto& [id, c] : patient_counts)
    patients.emplace_back(id, c.second >= c.first ? 1 : 0);

  Rng rng(mix_seed(seed, "stratified_split"));
  rng.shuffle(patients);

  std::array<std::array<int64_t, 2>, 3> assigned{};  // [split][class]
  std::array<int64_t, 2> total{};
  for (const auto& [_, label] : patients) ++total[static_cast<size_t>(label)];

  SplitAssignment split;
  split.seed = seed;
  split.fractions = fractions;
  for (const auto& [id, label] : patients) {
    int best = 0;
    double best_deficit = -1e300;
    for (int s = 0; s < 3; ++s) {
      const double target =
          fractions[static_cast<size_t>(s)] * static_cast<double>(total[static_cast<size_t>(label)]);
      const double deficit =
          target - static_cast<double>(assigned[static_cast<size_t>(s)][static_cast<size_t>(label)]);
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = s;
      }
    }
    assigned[static_cast<size_t>(best)][static_cast<size_t>(label)] += 1;
    split.by_patient[id] = kSplitNames[static_cast<size_t>(best)];
  }
  return split;
}

inline void persist_split(const std::string& path, const SplitAssignment& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("persist_split: cannot write " + path);
  char header[96];
  std::snprintf(header, sizeof(header), "# seed=%llu fractions=%.2f,%.2f,%.2f\n",
                static_cast<unsigned long long>(split.seed), split.fractions[0],
                split.fractions[1], split.fractions[2]);
  out << header;
  for (const auto& [patient, name] : split.by_patient) out << patient << '\t' << name << '\n';
  if (!out) throw IoError("persist_split: write failed for " + path);
}

inline SplitAssignment load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_split: cannot open " + path);
  SplitAssignment split;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      unsigned long long seed = 0;
      double f0 = 0, f1 = 0, f2 = 0;
      if (std::sscanf(line.c_str(), "# seed=%llu fractions=%lf,%lf,%lf", &seed, &f0, &f1, &f2) != 4)
        throw ParseError(path + ":" + std::to_string(lineno) + ": malformed header comment");
      split.seed = seed;
      split.fractions = {f0, f1, f2};
      have_header = true;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected patient<TAB>split");
    const std::string patient = line.substr(0, tab);
    const std::string name = line.substr(tab + 1);
    if (name != "train" && name != "val" && name != "test")
      throw ParseError(path + ":" + std::to_string(lineno) + ": unknown split name '" + name + "'");
    if (split.by_patient.count(patient))
      throw ParseError(path + ":" + std::to_string(lineno) + ": duplicate patient '" + patient + "'");
    split.by_patient[patient] = name;
  }
  if (!have_header) throw ParseError(path + ": missing `# seed=... fractions=...` header");
  if (split.by_patient.empty()) throw ParseError(path + ": no patient lines");
  return split;
}

inline uint64_t split_digest(const SplitAssignment& split) {
  uint64_t h = fnv1a64("split-v1");
  h = fnv1a64(&split.seed, sizeof(split.seed), h);
  for (const auto& [patient, name] : split.by_patient) {
    h = fnv1a64(patient, h);
    h = fnv1a64(name, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// synthetic dataset: bright blob on dark noise; malignant blobs get a
// star-perturbed border and speckled interior, benign blobs stay smooth
// ---------------------------------------------------------------------------

struct SynthSpec {
  int64_t n{100};
  int64_t image_size{64};
  uint64_t seed{0};
  std::string difficulty{"easy"};  // easy | medium | hard
};

struct SynthSample {
  ManifestRecord rec;
  std::vector<uint8_t> gray;  // image_size^2
};

namespace detail {

struct SynthKnobs {
  double benign_radius, malig_radius;  // fraction of image size
  double spike_amp;                    // border perturbation for class 1
  double texture_std;                  // interior speckle for class 1
};

inline SynthKnobs synth_knobs(const std::string& difficulty) {
  if (difficulty == "easy") return {0.16, 0.27, 0.35, 0.16};
  if (difficulty == "medium") return {0.20, 0.24, 0.25, 0.10};
  if (difficulty == "hard") return {0.22, 0.23, 0.12, 0.05};
  throw DataError("synth: unknown difficulty '" + difficulty + "'");
}

}  // namespace detail

inline std::vector<SynthSample> synth_generate(const SynthSpec& spec) {
  check(spec.n >= 4, "synth: need n >= 4");
  const auto knobs = detail::synth_knobs(spec.difficulty);
  const int64_t S = spec.image_size;
  Rng rng(mix_seed(spec.seed, "synth"));

  // patients of 1..3 consecutive ROIs
  std::vector<int64_t> patient_of(static_cast<size_t>(spec.n));
  {
    int64_t patient = 0, left = 0;
    for (int64_t i = 0; i < spec.n; ++i) {
      if (left == 0) {
        left = 1 + rng.uniform_int(3);
        ++patient;
      }
      patient_of[static_cast<size_t>(i)] = patient - 1;
      --left;
    }
  }

  std::vector<SynthSample> samples;
  samples.reserve(static_cast<size_t>(spec.n));
  for (int64_t i = 0; i < spec.n; ++i) {
    const int label = static_cast<int>(i % 2);  // alternating: balance within 1
    const double radius = (label == 1 ? knobs.malig_radius : knobs.benign_radius) *
                          static_cast<double>(S);
    const double cx = static_cast<double>(S) / 2.0 + rng.uniform(-0.08, 0.08) * static_cast<double>(S);
    const double cy = static_cast<double>(S) / 2.0 + rng.uniform(-0.08, 0.08) * static_cast<double>(S);
    const int spikes = 5 + static_cast<int>(rng.uniform_int(5));
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double brightness = rng.uniform(0.75, 0.95);

    std::vector<uint8_t> gray(static_cast<size_t>(S * S));
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double r = std::sqrt(dx * dx + dy * dy);
        const double ang = std::atan2(dy, dx);
        double edge = radius;
        if (label == 1)
          edge *= 1.0 + knobs.spike_amp * std::sin(static_cast<double>(spikes) * ang + phase);
        double v = rng.uniform(0.02, 0.10);  // dark noisy background
        if (r < edge) {
          const double falloff = 1.0 - 0.5 * (r / edge) * (r / edge);
          v = brightness * falloff;
          if (label == 1) v += knobs.texture_std * rng.normal();
        }
        gray[static_cast<size_t>(y * S + x)] =
            static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
      }

    SynthSample sample;
    char pid[32], aid[32], pathbuf[64];
    std::snprintf(pid, sizeof(pid), "P%04lld", static_cast<long long>(patient_of[static_cast<size_t>(i)]));
    std::snprintf(aid, sizeof(aid), "A%05lld", static_cast<long long>(i));
    std::snprintf(pathbuf, sizeof(pathbuf), "images/roi_%05lld.pgm", static_cast<long long>(i));
    sample.rec.patient_id = pid;
    sample.rec.abnormality_id = aid;
    sample.rec.image_path = pathbuf;
    // exercise both benign spellings
    sample.rec.pathology = label == 1 ? "MALIGNANT"
                           : (i % 4 == 0 ? "BENIGN_WITHOUT_CALLBACK" : "BENIGN");
    sample.rec.label = label;
    sample.gray = std::move(gray);
    samples.push_back(std::move(sample));
  }
  return samples;
}

// Writes images/ and manifest.csv under out_dir.
inline void synth_write(const SynthSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("synth: cannot create " + out_dir);
  auto samples = synth_generate(spec);
  std::ofstream manifest(fs::path(out_dir) / "manifest.csv", std::ios::binary);
  if (!manifest) throw IoError("synth: cannot write manifest in " + out_dir);
  manifest << "patient_id,abnormality_id,image_path,pathology\n";
  for (const auto& s : samples) {
    write_pgm((fs::path(out_dir) / s.rec.image_path).string(), s.gray.data(), spec.image_size,
              spec.image_size);
    manifest << s.rec.patient_id << ',' << s.rec.abnormality_id << ',' << s.rec.image_path << ','
             << s.rec.pathology << '\n';
  }
  if (!manifest) throw IoError("synth: manifest write failed");
}

// ---------------------------------------------------------------------------
// dataset loader: deterministic preprocessing, per-(epoch, ordinal) seeded
// augmentation on the train split only
// ---------------------------------------------------------------------------

class RoiDataset {
 public:
  RoiDataset(std::string root, std::vector<ManifestRecord> records, const SplitAssignment& split,
             int64_t image_size, uint64_t seed)
      : root_(std::move(root)), records_(std::move(records)), image_size_(image_size), seed_(seed) {
    for (size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      ImageTensor img;
      try {
        img = preprocess(r);
      } catch (const Error& e) {
        skipped_.push_back(r.image_path + ": " + e.what());
        continue;
      }
      cache_.push_back(std::move(img));
      const size_t ci = cache_.size() - 1;
      const std::string& s = split.of(r.patient_id);
      if (s == "train")
        train_.push_back({i, ci});
      else if (s == "val")
        val_.push_back({i, ci});
      else
        test_.push_back({i, ci});
    }
  }

  struct Entry {
    size_t record;
    size_t cached;
  };

  const std::vector<Entry>& train() const { return train_; }
  const std::vector<Entry>& val() const { return val_; }
  const std::vector<Entry>& test() const { return test_; }
  const std::vector<Entry>& partition(const std::string& name) const {
    if (name == "train") return train_;
    if (name == "val") return val_;
    if (name == "test") return test_;
    throw DataError("dataset: unknown partition '" + name + "'");
  }
  const std::vector<std::string>& skipped() const { return skipped_; }
  const ManifestRecord& record(size_t i) const { return records_[i]; }
  int64_t image_size() const { return image_size_; }

  // Validation/test path: the cached tensor, bit-identical across epochs.
  const ImageTensor& eval_tensor(const Entry& e) const { return cache_[e.cached]; }

  // Train path: augmentation drawn from a stream keyed by (seed, epoch,
  // record index), then normalized. Reproducible regardless of batch shape.
  ImageTensor train_tensor(const Entry& e, int64_t epoch) const {
    Rng rng(mix_seed(seed_, "augment", static_cast<uint64_t>(epoch) << 32 |
                                           static_cast<uint64_t>(e.record)));
    ImageTensor img = apply_augment(cache_[e.cached], draw_augment(rng));
    normalize(img, kImagenetMean, kImagenetStd);
    return img;
  }

  ImageTensor normalized_eval_tensor(const Entry& e) const {
    ImageTensor img = cache_[e.cached];
    normalize(img, kImagenetMean, kImagenetStd);
    return img;
  }

  float label_of(const Entry& e) const { return static_cast<float>(records_[e.record].label); }

 private:
  ImageTensor preprocess(const ManifestRecord& r) const {
    ImageTensor img = load_image((std::filesystem::path(root_) / r.image_path).string());
    if (img.height != image_size_ || img.width != image_size_)
      img = resize_bicubic(img, image_size_, image_size_);
    return img;  // normalization happens after augmentation
  }

  std::string root_;
  std::vector<ManifestRecord> records_;
  int64_t image_size_;
  uint64_t seed_;
  std::vector<ImageTensor> cache_;  // resized, pre-normalization
  std::vector<Entry> train_, val_, test_;
  std::vector<std::string> skipped_;
};

}  // namespace hybridroi
