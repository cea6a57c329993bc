#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpoxvlm/clinical_codes.hpp"
#include "mpoxvlm/common.hpp"
#include "mpoxvlm/image.hpp"
#include "mpoxvlm/png_io.hpp"

namespace mpoxvlm {

using ordered_json = nlohmann::ordered_json;

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split split_from_name(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split name: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Generator distribution. These constants define the synthetic population;
// the Bayes oracle below evaluates the exact posterior they induce.
// ---------------------------------------------------------------------------

struct GeneratorModel {
  // Body parts whose joint distribution with age skews toward mpox.
  static constexpr std::array<int, 3> high_risk_parts = {7, 9, 10};  // face, genital, anal
  static constexpr std::array<int, 8> low_risk_parts = {1, 2, 3, 4, 5, 6, 8, 11};
  static constexpr double p_high_given_mpox = 0.85;
  static constexpr double p_high_given_other = 0.15;
  static constexpr double p_adult_given_mpox = 0.9;
  static constexpr double p_adult_given_other = 0.5;
  // Morphology cue: mpox lesion crops are mostly monomorphic (uniform lesion
  // size); visual mimics are mostly polymorphic (strongly varied sizes).
  static constexpr double p_uniform_mpox = 0.8;
  static constexpr double p_uniform_mimic = 0.15;

  // Non-mpox diseases rendered with mpox-like ring lesions (image-ambiguous).
  static constexpr std::array<int, 6> mimic_diseases = {1, 2, 4, 11, 18, 22};
  // Non-mpox diseases rendered with clearly different streak/patch lesions.
  static constexpr std::array<int, 10> plain_diseases = {10, 12, 13, 34, 41,
                                                         42, 49, 57, 61, 64};

  static bool is_high_risk_part(int body_part) {
    for (int p : high_risk_parts)
      if (p == body_part) return true;
    return false;
  }
};

struct GeneratorConfig {
  int total = 980;
  double mpox_fraction = 0.36;
  double gamma = 0.3;  // fraction of non-mpox patients rendered mpox-like
  int image_size = 64;
  int min_samples_per_patient = 1;
  int max_samples_per_patient = 3;
  std::array<double, 3> split_ratios = {5.0, 1.0, 1.0};
  std::array<double, 2> test_pos_neg = {4.0, 7.0};

  void validate() const {
    require(total >= 20, "total size must be >= 20, got " + std::to_string(total));
    require(mpox_fraction > 0.0 && mpox_fraction < 1.0,
            "mpox_fraction must be inside (0,1), got " + format_double(mpox_fraction));
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must be in [0,1]");
    require(image_size >= 16, "image_size must be >= 16");
    require(min_samples_per_patient >= 1 &&
                max_samples_per_patient >= min_samples_per_patient,
            "invalid samples-per-patient range");
    for (double r : split_ratios) require(r > 0.0, "split ratios must be positive");
    require(test_pos_neg[0] > 0.0 && test_pos_neg[1] > 0.0,
            "test_pos_neg ratio must be positive");
  }

  ordered_json to_json() const {
    return ordered_json{{"total", total},
                        {"mpox_fraction", mpox_fraction},
                        {"gamma", gamma},
                        {"image_size", image_size},
                        {"min_samples_per_patient", min_samples_per_patient},
                        {"max_samples_per_patient", max_samples_per_patient},
                        {"split_ratios", split_ratios},
                        {"test_pos_neg", test_pos_neg}};
  }

  static GeneratorConfig from_json(const ordered_json& j) {
    GeneratorConfig c;
    c.total = j.at("total").get<int>();
    c.mpox_fraction = j.at("mpox_fraction").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.image_size = j.at("image_size").get<int>();
    c.min_samples_per_patient = j.at("min_samples_per_patient").get<int>();
    c.max_samples_per_patient = j.at("max_samples_per_patient").get<int>();
    auto sr = j.at("split_ratios");
    for (int i = 0; i < 3; ++i) c.split_ratios[static_cast<size_t>(i)] = sr.at(i).get<double>();
    auto tp = j.at("test_pos_neg");
    for (int i = 0; i < 2; ++i) c.test_pos_neg[static_cast<size_t>(i)] = tp.at(i).get<double>();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Text templates
// ---------------------------------------------------------------------------

inline constexpr std::string_view kQuestionText =
    "After reviewing this skin lesion image, do you think the patient has mpox?";
inline constexpr std::string_view kMpoxOption = "Yes, the patient has mpox.";
inline constexpr std::string_view kNonMpoxOption = "No, the patient does not have mpox.";

inline std::string body_part_phrase(int code) {
  static const std::array<std::string_view, 12> phrases = {
      "an unknown area", "the hand", "the foot",         "the arm",
      "the leg",         "the chest", "the back",        "the face",
      "the neck",        "the genital area", "the anal area", "the scalp"};
  require(code >= 0 && code < static_cast<int>(phrases.size()), "body part code out of range");
  return std::string(phrases[static_cast<size_t>(code)]);
}

// Clinical context sentence ($X_c$). Lesion stage is deliberately excluded:
// it is annotated only for mpox and would leak the label.
inline std::string render_context(const ClinicalAttributes& a) {
  std::string who = a.age_group == AgeGroup::adult ? "an adult" : "a child";
  std::string gender = a.gender == GenderPresentation::unknown
                           ? "person"
                           : std::string(gender_name(a.gender));
  return "The patient is " + who + " " + gender + " with Fitzpatrick skin type " +
         std::to_string(a.fitzpatrick) + ". The lesion is on " +
         body_part_phrase(a.body_part) + ".";
}

inline std::string render_options_text(const std::string& mpox_option,
                                        const std::string& other_option) {
  return "Options: " + mpox_option + " " + other_option;
}

inline std::string render_options_text() {
  return render_options_text(std::string(kMpoxOption), std::string(kNonMpoxOption));
}

struct VqaInstance {
  std::string image_ref;
  std::string context_text;
  std::string question_text;
  std::array<std::string, 2> options;  // fixed order: mpox option first
  std::string answer;
  bool label = false;
  Split split = Split::train;

  void validate() const {
    require(!options[0].empty() && !options[1].empty(), "options must be non-empty");
    require(answer == options[0] || answer == options[1], "answer must be one of the options");
    require(label == (answer == options[0]), "label inconsistent with answer");
  }
};

inline VqaInstance build_vqa(const ClinicalAttributes& attrs) {
  attrs.validate();
  VqaInstance v;
  v.context_text = render_context(attrs);
  v.question_text = std::string(kQuestionText);
  v.options = {std::string(kMpoxOption), std::string(kNonMpoxOption)};
  v.label = attrs.is_mpox();
  v.answer = v.label ? v.options[0] : v.options[1];
  return v;
}

// ---------------------------------------------------------------------------
// Image rendering
// ---------------------------------------------------------------------------

struct LesionBlob {
  double cx = 0.0, cy = 0.0;
  double radius = 0.0;
  double angle = 0.0;       // streaks only
  double elongation = 1.0;  // streaks only
  double darkness = 1.0;
};

// The render-time latent state of one sample. Fully determined by
// (attrs, gen_seed); recorded in the manifest so the Bayes oracle can
// condition on the image-level evidence without touching pixels.
struct RenderLatents {
  bool ring_phenotype = false;  // mpox-like rings vs streaky patches
  bool uniform_size = false;    // monomorphic vs polymorphic lesion sizes
  int visual_stage = 0;         // mpox: annotated stage; mimics: hidden pseudo-stage
  std::vector<LesionBlob> lesions;
};

inline std::uint64_t attrs_fingerprint(const ClinicalAttributes& a) {
  std::string key = std::to_string(a.patient_id) + "|" + std::to_string(a.fitzpatrick) +
                    "|" + std::to_string(a.body_part) + "|" +
                    std::to_string(static_cast<int>(a.age_group)) + "|" +
                    std::to_string(static_cast<int>(a.gender)) + "|" +
                    std::to_string(a.disease_id) + "|" + std::to_string(a.stage);
  return fnv1a64(key);
}

inline bool is_mimic_disease(int disease_id) {
  for (int d : GeneratorModel::mimic_diseases)
    if (d == disease_id) return true;
  return false;
}

inline RenderLatents render_latents(const ClinicalAttributes& attrs, std::uint64_t gen_seed,
                                    int image_size) {
  Rng rng(derive_seed(gen_seed, "render", attrs_fingerprint(attrs)));
  RenderLatents lat;
  lat.ring_phenotype = attrs.is_mpox() || is_mimic_disease(attrs.disease_id);

  if (lat.ring_phenotype) {
    lat.visual_stage = attrs.is_mpox() ? attrs.stage
                                       : static_cast<int>(rng.randint(0, 8));
    double p_uniform = attrs.is_mpox() ? GeneratorModel::p_uniform_mpox
                                       : GeneratorModel::p_uniform_mimic;
    lat.uniform_size = rng.bernoulli(p_uniform);
    int count = static_cast<int>(rng.randint(3, 6));
    double margin = 0.14 * image_size;
    for (int i = 0; i < count; ++i) {
      LesionBlob b;
      b.cx = rng.uniform(margin, image_size - margin);
      b.cy = rng.uniform(margin, image_size - margin);
      double base_r = image_size * (0.08 + 0.006 * lat.visual_stage);
      b.radius = base_r * (lat.uniform_size ? rng.uniform(0.96, 1.04)
                                            : rng.uniform(0.55, 1.45));
      b.darkness = (0.8 + 0.03 * lat.visual_stage) * rng.uniform(0.9, 1.1);
      lat.lesions.push_back(b);
    }
  } else {
    lat.visual_stage = static_cast<int>(rng.randint(0, 8));
    lat.uniform_size = false;
    int count = static_cast<int>(rng.randint(2, 5));
    double margin = 0.17 * image_size;
    for (int i = 0; i < count; ++i) {
      LesionBlob b;
      b.cx = rng.uniform(margin, image_size - margin);
      b.cy = rng.uniform(margin, image_size - margin);
      b.radius = image_size * rng.uniform(0.12, 0.2);
      b.angle = rng.uniform(0.0, M_PI);
      b.elongation = rng.uniform(3.5, 6.0);
      b.darkness = rng.uniform(0.75, 1.05);
      lat.lesions.push_back(b);
    }
  }
  return lat;
}

inline double background_tone(int fitzpatrick) {
  if (fitzpatrick == 0) return 0.55;
  return 0.88 - 0.105 * fitzpatrick;  // strictly decreasing in skin type
}

inline Image render_image(const ClinicalAttributes& attrs, std::uint64_t gen_seed,
                          int image_size = 64) {
  attrs.validate();
  RenderLatents lat = render_latents(attrs, gen_seed, image_size);
  // Separate noise stream so latent draws stay aligned with render_latents.
  Rng noise(derive_seed(gen_seed, "render-noise", attrs_fingerprint(attrs)));

  Image img(image_size, image_size);
  double tone = background_tone(attrs.fitzpatrick);
  for (int y = 0; y < image_size; ++y) {
    double grad = 0.02 * (static_cast<double>(y) / image_size - 0.5);
    for (int x = 0; x < image_size; ++x) {
      double n = noise.normal(0.0, 0.015);
      double t = tone + grad + n;
      img.at(y, x, 0) = t + 0.06;
      img.at(y, x, 1) = t * 0.92;
      img.at(y, x, 2) = t * 0.78;
    }
  }

  for (const auto& b : lat.lesions) {
    if (lat.ring_phenotype) {
      double band = 0.18 * b.radius + 0.8;
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          double dx = x - b.cx, dy = y - b.cy;
          double d = std::sqrt(dx * dx + dy * dy);
          if (d > b.radius + 4.0 * band) continue;
          double ring = std::exp(-((d - b.radius) * (d - b.radius)) / (band * band));
          double disc = d < b.radius ? 0.25 : 0.0;
          double m = b.darkness * (ring + disc * (1.0 - ring));
          img.at(y, x, 0) -= 0.05 * m;
          img.at(y, x, 1) -= 0.22 * m;
          img.at(y, x, 2) -= 0.20 * m;
        }
      }
    } else {
      double ca = std::cos(b.angle), sa = std::sin(b.angle);
      double ax_major = b.radius;
      double ax_minor = b.radius / b.elongation;
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          double dx = x - b.cx, dy = y - b.cy;
          double u = (dx * ca + dy * sa) / ax_major;
          double v = (-dx * sa + dy * ca) / ax_minor;
          double d2 = u * u + v * v;
          if (d2 > 9.0) continue;
          double m = b.darkness * std::exp(-d2);
          img.at(y, x, 0) -= 0.05 * m;
          img.at(y, x, 1) -= 0.22 * m;
          img.at(y, x, 2) -= 0.20 * m;
        }
      }
    }
  }

  img.clamp01();
  return img;
}

// Contrastive-pretraining caption: describes tone and lesion count only.
// Lesion morphology stays out of the captions, mirroring generic pretraining
// that was never aligned to the diagnostic cue.
inline std::string render_caption(const ClinicalAttributes& attrs, const RenderLatents& lat) {
  static const std::array<std::string_view, 7> tone_words = {
      "unspecified", "pale", "fair", "olive", "tan", "brown", "dark"};
  static const std::array<std::string_view, 7> count_words = {
      "zero", "one", "two", "three", "four", "five", "six"};
  size_t count = std::min<size_t>(lat.lesions.size(), 6);
  return "a photo of " + std::string(tone_words[static_cast<size_t>(attrs.fitzpatrick)]) +
         " skin with " + std::string(count_words[count]) + " skin lesions.";
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct SampleRecord {
  ClinicalAttributes attrs;
  std::string image_path;
  std::uint64_t gen_seed = 0;
  bool mimic = false;
  bool uniform_size = false;
  VqaInstance vqa;
  Split split = Split::train;
};

struct SplitCounts {
  std::int64_t train = 0, val = 0, test = 0;
  std::int64_t positives = 0, negatives = 0;
  std::int64_t test_positives = 0, test_negatives = 0;
};

struct DatasetManifest {
  static constexpr int schema_version = 1;
  GeneratorConfig config;
  std::uint64_t master_seed = 0;
  std::vector<SampleRecord> records;
  SplitCounts counts;

  void recount() {
    counts = SplitCounts{};
    for (const auto& r : records) {
      switch (r.split) {
        case Split::train: ++counts.train; break;
        case Split::val: ++counts.val; break;
        case Split::test: ++counts.test; break;
      }
      if (r.vqa.label) {
        ++counts.positives;
        if (r.split == Split::test) ++counts.test_positives;
      } else {
        ++counts.negatives;
        if (r.split == Split::test) ++counts.test_negatives;
      }
    }
  }

  std::string config_hash() const {
    ordered_json j = config.to_json();
    j["master_seed"] = master_seed;
    return hex64(fnv1a64(j.dump()));
  }
};

inline ordered_json record_to_json(const SampleRecord& r) {
  ordered_json j;
  j["patient_id"] = r.attrs.patient_id;
  j["fitzpatrick"] = r.attrs.fitzpatrick;
  j["body_part"] = r.attrs.body_part;
  j["age_group"] = std::string(age_group_name(r.attrs.age_group));
  j["gender"] = std::string(gender_name(r.attrs.gender));
  j["disease_id"] = r.attrs.disease_id;
  if (r.attrs.stage >= 0) j["stage"] = r.attrs.stage;
  else j["stage"] = nullptr;
  j["mimic"] = r.mimic;
  j["uniform_size"] = r.uniform_size;
  j["split"] = std::string(split_name(r.split));
  j["image"] = r.image_path;
  j["gen_seed"] = r.gen_seed;
  j["context"] = r.vqa.context_text;
  j["question"] = r.vqa.question_text;
  j["options"] = r.vqa.options;
  j["answer"] = r.vqa.answer;
  j["label"] = r.vqa.label;
  return j;
}

inline SampleRecord record_from_json(const ordered_json& j) {
  SampleRecord r;
  r.attrs.patient_id = j.at("patient_id").get<std::int64_t>();
  r.attrs.fitzpatrick = j.at("fitzpatrick").get<int>();
  r.attrs.body_part = j.at("body_part").get<int>();
  std::string age = j.at("age_group").get<std::string>();
  r.attrs.age_group = age == "adult" ? AgeGroup::adult : AgeGroup::child;
  std::string gender = j.at("gender").get<std::string>();
  r.attrs.gender = gender == "male"     ? GenderPresentation::male
                   : gender == "female" ? GenderPresentation::female
                                        : GenderPresentation::unknown;
  r.attrs.disease_id = j.at("disease_id").get<int>();
  r.attrs.stage = j.at("stage").is_null() ? -1 : j.at("stage").get<int>();
  r.mimic = j.at("mimic").get<bool>();
  r.uniform_size = j.at("uniform_size").get<bool>();
  r.split = split_from_name(j.at("split").get<std::string>());
  r.image_path = j.at("image").get<std::string>();
  r.gen_seed = j.at("gen_seed").get<std::uint64_t>();
  r.vqa.image_ref = r.image_path;
  r.vqa.context_text = j.at("context").get<std::string>();
  r.vqa.question_text = j.at("question").get<std::string>();
  auto opts = j.at("options");
  r.vqa.options = {opts.at(0).get<std::string>(), opts.at(1).get<std::string>()};
  r.vqa.answer = j.at("answer").get<std::string>();
  r.vqa.label = j.at("label").get<bool>();
  r.vqa.split = r.split;
  return r;
}

inline std::string manifest_to_jsonl(const DatasetManifest& m) {
  std::string out;
  for (const auto& r : m.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
  return a.master_seed == b.master_seed && a.config.to_json() == b.config.to_json() &&
         manifest_to_jsonl(a) == manifest_to_jsonl(b);
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

namespace detail {

struct PatientGroup {
  std::int64_t patient_id = 0;
  std::vector<size_t> record_indices;
  bool positive = false;
  int size() const { return static_cast<int>(record_indices.size()); }
};

// Greedy fill toward an exact sample-count target; patches the remaining gap
// with a patient of exactly (or within one of) the right size. Returns the
// chosen group indices; `taken` flags are updated.
inline std::vector<size_t> fill_to_target(const std::vector<PatientGroup>& groups,
                                          const std::vector<size_t>& order,
                                          std::vector<bool>& taken, std::int64_t target) {
  std::vector<size_t> chosen;
  std::int64_t sum = 0;
  for (size_t gi : order) {
    if (taken[gi]) continue;
    if (sum + groups[gi].size() <= target) {
      taken[gi] = true;
      chosen.push_back(gi);
      sum += groups[gi].size();
    }
  }
  std::int64_t gap = target - sum;
  for (std::int64_t want : {gap, gap + 1, gap - 1}) {
    if (gap == 0) break;
    if (want <= 0) continue;
    for (size_t gi : order) {
      if (taken[gi]) continue;
      if (groups[gi].size() == want) {
        taken[gi] = true;
        chosen.push_back(gi);
        sum += want;
        gap = target - sum;
        break;
      }
    }
    if (gap <= 0) break;
  }
  return chosen;
}

}  // namespace detail

// Patient-grouped split: every sample of a patient lands in one split, the
// test split hits the requested positive:negative ratio, and split sizes land
// within one patient group of the requested proportions.
inline DatasetManifest split_dataset(DatasetManifest manifest,
                                     std::array<double, 3> ratios,
                                     std::array<double, 2> test_pos_neg,
                                     std::uint64_t seed) {
  for (double r : ratios) require(r > 0.0, "split ratios must be positive");
  require(test_pos_neg[0] > 0.0 && test_pos_neg[1] > 0.0, "test ratio must be positive");

  std::map<std::int64_t, detail::PatientGroup> by_patient;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    auto& g = by_patient[manifest.records[i].attrs.patient_id];
    g.patient_id = manifest.records[i].attrs.patient_id;
    g.record_indices.push_back(i);
    g.positive = manifest.records[i].vqa.label;
  }
  std::vector<detail::PatientGroup> groups;
  groups.reserve(by_patient.size());
  for (auto& [_, g] : by_patient) groups.push_back(std::move(g));

  std::int64_t n = static_cast<std::int64_t>(manifest.records.size());
  double ratio_sum = ratios[0] + ratios[1] + ratios[2];
  std::int64_t test_target = std::llround(n * ratios[2] / ratio_sum);
  std::int64_t val_target = std::llround(n * ratios[1] / ratio_sum);
  double pos_frac = test_pos_neg[0] / (test_pos_neg[0] + test_pos_neg[1]);
  std::int64_t test_pos_target = std::llround(test_target * pos_frac);
  std::int64_t test_neg_target = test_target - test_pos_target;

  std::int64_t total_pos = 0;
  for (const auto& g : groups)
    if (g.positive) total_pos += g.size();
  std::int64_t total_neg = n - total_pos;
  require(test_pos_target <= total_pos && test_neg_target <= total_neg,
          "infeasible test class ratio for the given class counts");

  std::vector<size_t> order(groups.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);

  std::vector<size_t> pos_order, neg_order;
  for (size_t gi : order) (groups[gi].positive ? pos_order : neg_order).push_back(gi);

  std::vector<bool> taken(groups.size(), false);
  auto test_pos = detail::fill_to_target(groups, pos_order, taken, test_pos_target);
  auto test_neg = detail::fill_to_target(groups, neg_order, taken, test_neg_target);
  auto val_groups = detail::fill_to_target(groups, order, taken, val_target);

  auto assign = [&](const std::vector<size_t>& gs, Split s) {
    for (size_t gi : gs)
      for (size_t ri : groups[gi].record_indices) {
        manifest.records[ri].split = s;
        manifest.records[ri].vqa.split = s;
      }
  };
  assign(test_pos, Split::test);
  assign(test_neg, Split::test);
  assign(val_groups, Split::val);
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    if (!taken[gi]) assign({gi}, Split::train);
  }

  manifest.recount();

  std::int64_t max_group = 0;
  for (const auto& g : groups) max_group = std::max<std::int64_t>(max_group, g.size());
  require(std::llabs(manifest.counts.test - test_target) <= max_group,
          "test split size misses target by more than one patient group");
  require(std::llabs(manifest.counts.val - val_target) <= max_group,
          "val split size misses target by more than one patient group");
  double realized = manifest.counts.test == 0
                        ? 0.0
                        : static_cast<double>(manifest.counts.test_positives) /
                              static_cast<double>(manifest.counts.test);
  require(std::abs(realized - pos_frac) <= 0.02,
          "test class ratio misses target by more than 2%");
  return manifest;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline DatasetManifest generate_dataset(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();

  // Patient sizes, trimmed so sample count is exactly config.total.
  Rng size_rng(derive_seed(seed, "patient-sizes"));
  std::vector<int> sizes;
  std::int64_t sum = 0;
  while (sum < config.total) {
    int s = static_cast<int>(size_rng.randint(config.min_samples_per_patient,
                                              config.max_samples_per_patient));
    s = static_cast<int>(std::min<std::int64_t>(s, config.total - sum));
    sizes.push_back(s);
    sum += s;
  }
  size_t n_patients = sizes.size();

  // Assign patient classes so sample-level positives hit the quota (±1).
  std::int64_t pos_quota = std::llround(config.total * config.mpox_fraction);
  std::vector<size_t> order(n_patients);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng class_rng(derive_seed(seed, "patient-classes"));
  class_rng.shuffle(order);

  std::vector<bool> positive(n_patients, false);
  std::int64_t pos_sum = 0;
  for (size_t pi : order) {
    if (pos_sum + sizes[pi] <= pos_quota) {
      positive[pi] = true;
      pos_sum += sizes[pi];
    }
  }
  std::int64_t gap = pos_quota - pos_sum;
  for (std::int64_t want : {gap, gap + 1, gap - 1}) {
    if (gap == 0) break;
    if (want <= 0) continue;
    bool found = false;
    for (size_t pi : order) {
      if (!positive[pi] && sizes[pi] == want) {
        positive[pi] = true;
        pos_sum += want;
        found = true;
        break;
      }
    }
    if (found) break;
  }
  require(std::llabs(pos_sum - pos_quota) <= 1,
          "could not hit the requested class counts within one sample");

  DatasetManifest manifest;
  manifest.config = config;
  manifest.master_seed = seed;

  std::vector<int> mimics(GeneratorModel::mimic_diseases.begin(),
                          GeneratorModel::mimic_diseases.end());
  std::vector<int> plains(GeneratorModel::plain_diseases.begin(),
                          GeneratorModel::plain_diseases.end());
  std::vector<int> high(GeneratorModel::high_risk_parts.begin(),
                        GeneratorModel::high_risk_parts.end());
  std::vector<int> low(GeneratorModel::low_risk_parts.begin(),
                       GeneratorModel::low_risk_parts.end());

  std::int64_t sample_index = 0;
  for (size_t pi = 0; pi < n_patients; ++pi) {
    Rng prng(derive_seed(seed, "patient", pi));
    bool y = positive[pi];

    ClinicalAttributes base;
    base.patient_id = static_cast<std::int64_t>(pi);
    base.fitzpatrick = static_cast<int>(prng.randint(1, 6));
    base.age_group = prng.bernoulli(y ? GeneratorModel::p_adult_given_mpox
                                      : GeneratorModel::p_adult_given_other)
                         ? AgeGroup::adult
                         : AgeGroup::child;
    base.gender = static_cast<GenderPresentation>(prng.randint(0, 2));
    bool mimic = false;
    if (y) {
      base.disease_id = kMpoxDiseaseId;
    } else {
      mimic = prng.bernoulli(config.gamma);
      base.disease_id = mimic ? prng.choice(mimics) : prng.choice(plains);
    }

    for (int s = 0; s < sizes[pi]; ++s) {
      SampleRecord rec;
      rec.attrs = base;
      double p_high = y ? GeneratorModel::p_high_given_mpox
                        : GeneratorModel::p_high_given_other;
      rec.attrs.body_part = prng.bernoulli(p_high) ? prng.choice(high) : prng.choice(low);
      rec.attrs.stage = y ? static_cast<int>(prng.randint(0, 8)) : -1;
      rec.gen_seed = derive_seed(seed, "sample", static_cast<std::uint64_t>(sample_index));
      rec.mimic = mimic;

      char buf[48];
      std::snprintf(buf, sizeof(buf), "images/img_%05lld.png",
                    static_cast<long long>(sample_index));
      rec.image_path = buf;

      RenderLatents lat = render_latents(rec.attrs, rec.gen_seed, config.image_size);
      rec.uniform_size = lat.uniform_size;

      rec.vqa = build_vqa(rec.attrs);
      rec.vqa.image_ref = rec.image_path;
      manifest.records.push_back(std::move(rec));
      ++sample_index;
    }
  }

  manifest = split_dataset(std::move(manifest), config.split_ratios, config.test_pos_neg,
                           derive_seed(seed, "split-seed"));
  return manifest;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "manifest.jsonl", manifest_to_jsonl(manifest));

  ordered_json gj;
  gj["schema_version"] = DatasetManifest::schema_version;
  gj["master_seed"] = manifest.master_seed;
  gj["config"] = manifest.config.to_json();
  gj["config_hash"] = manifest.config_hash();
  gj["counts"] = ordered_json{{"total", manifest.records.size()},
                              {"train", manifest.counts.train},
                              {"val", manifest.counts.val},
                              {"test", manifest.counts.test},
                              {"positives", manifest.counts.positives},
                              {"negatives", manifest.counts.negatives},
                              {"test_positives", manifest.counts.test_positives},
                              {"test_negatives", manifest.counts.test_negatives}};
  write_file(dir / "generator.json", gj.dump(2) + "\n");

  for (const auto& r : manifest.records) {
    Image img = render_image(r.attrs, r.gen_seed, manifest.config.image_size);
    write_png(dir / r.image_path, img);
  }
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir,
                                     bool check_images = true) {
  std::filesystem::path gpath = dir / "generator.json";
  if (!std::filesystem::exists(gpath))
    throw ValidationError("missing generator.json in " + dir.string());
  ordered_json gj;
  try {
    gj = ordered_json::parse(read_file(gpath));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("generator.json: " + std::string(e.what()));
  }
  int version = gj.at("schema_version").get<int>();
  require(version == DatasetManifest::schema_version,
          "schema_version mismatch: expected " +
              std::to_string(DatasetManifest::schema_version) + ", got " +
              std::to_string(version));

  DatasetManifest m;
  m.master_seed = gj.at("master_seed").get<std::uint64_t>();
  m.config = GeneratorConfig::from_json(gj.at("config"));

  std::string jsonl = read_file(dir / "manifest.jsonl");
  size_t line_no = 0;
  size_t pos = 0;
  while (pos < jsonl.size()) {
    size_t end = jsonl.find('\n', pos);
    if (end == std::string::npos) end = jsonl.size();
    std::string line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      SampleRecord rec = record_from_json(ordered_json::parse(line));
      rec.attrs.validate();
      rec.vqa.validate();
      m.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("manifest.jsonl line " + std::to_string(line_no) + ": " +
                            std::string(e.what()));
    } catch (const ValidationError& e) {
      throw ValidationError("manifest.jsonl line " + std::to_string(line_no) + ": " +
                            std::string(e.what()));
    }
  }
  m.recount();

  auto counts = gj.at("counts");
  require(counts.at("total").get<size_t>() == m.records.size(),
          "declared total does not match record count");
  require(counts.at("train").get<std::int64_t>() == m.counts.train &&
              counts.at("val").get<std::int64_t>() == m.counts.val &&
              counts.at("test").get<std::int64_t>() == m.counts.test,
          "declared split counts do not match records");

  if (check_images) {
    for (const auto& r : m.records) {
      if (!std::filesystem::exists(dir / r.image_path))
        throw ValidationError("missing image file: " + (dir / r.image_path).string());
    }
  }
  return m;
}

// Loads the stored pixels for one record. Falls back to an in-memory render
// (quantized exactly like the PNG path) when the manifest was never saved.
inline Image load_sample_image(const DatasetManifest& m, const SampleRecord& r,
                               const std::filesystem::path& dir) {
  if (!dir.empty() && std::filesystem::exists(dir / r.image_path))
    return read_png(dir / r.image_path);
  Image img = render_image(r.attrs, r.gen_seed, m.config.image_size);
  return dequantize_u8(quantize_u8(img), img.height, img.width);
}

// ---------------------------------------------------------------------------
// Analytic Bayes oracle
// ---------------------------------------------------------------------------

struct BayesReport {
  double image_only_accuracy = 0.0;
  double image_text_accuracy = 0.0;
  std::int64_t n = 0;
};

// Evaluates the exact generative posterior per sample (image evidence =
// phenotype + umbilication cue; text evidence adds body-part group and age)
// and scores the induced Bayes decision rules against the true labels.
inline BayesReport bayes_oracle(const DatasetManifest& m,
                                std::optional<Split> split = std::nullopt) {
  const double gamma = m.config.gamma;
  std::int64_t n_pos = 0, n_tot = 0;
  for (const auto& r : m.records) {
    if (split && r.split != *split) continue;
    ++n_tot;
    if (r.vqa.label) ++n_pos;
  }
  require(n_tot > 0 && n_pos > 0 && n_pos < n_tot,
          "bayes oracle needs both classes present");
  double prior_odds = static_cast<double>(n_pos) / static_cast<double>(n_tot - n_pos);

  BayesReport rep;
  rep.n = n_tot;
  std::int64_t img_correct = 0, joint_correct = 0;
  for (const auto& r : m.records) {
    if (split && r.split != *split) continue;
    bool ring = r.attrs.is_mpox() || r.mimic;
    double lr_img;
    if (!ring) {
      lr_img = 0.0;  // plain phenotype never occurs under mpox
    } else if (r.uniform_size) {
      lr_img = GeneratorModel::p_uniform_mpox / (gamma * GeneratorModel::p_uniform_mimic);
    } else {
      lr_img = (1.0 - GeneratorModel::p_uniform_mpox) /
               (gamma * (1.0 - GeneratorModel::p_uniform_mimic));
    }
    bool high = GeneratorModel::is_high_risk_part(r.attrs.body_part);
    double lr_part = high ? GeneratorModel::p_high_given_mpox / GeneratorModel::p_high_given_other
                          : (1.0 - GeneratorModel::p_high_given_mpox) /
                                (1.0 - GeneratorModel::p_high_given_other);
    bool adult = r.attrs.age_group == AgeGroup::adult;
    double lr_age = adult ? GeneratorModel::p_adult_given_mpox / GeneratorModel::p_adult_given_other
                          : (1.0 - GeneratorModel::p_adult_given_mpox) /
                                (1.0 - GeneratorModel::p_adult_given_other);

    bool img_pred = prior_odds * lr_img > 1.0;
    bool joint_pred = prior_odds * lr_img * lr_part * lr_age > 1.0;
    if (img_pred == r.vqa.label) ++img_correct;
    if (joint_pred == r.vqa.label) ++joint_correct;
  }
  rep.image_only_accuracy = static_cast<double>(img_correct) / static_cast<double>(n_tot);
  rep.image_text_accuracy = static_cast<double>(joint_correct) / static_cast<double>(n_tot);
  return rep;
}

}  // namespace mpoxvlm
