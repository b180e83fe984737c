/// @file capability.hpp
/// Capability taxonomy and the data model shared across the pipeline:
/// the closed 12-category space, image asset references, diagnostic
/// instances, verdicts, and the JSONL dataset record format used by the
/// seed pool, diagnostic pool, and generated training sets.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpe/common.hpp"

namespace dpe::caps {

// ---------------------------------------------------------------------------
// Categories. The list is closed and ordered; quota accounting depends on
// exact identity, so unknown tokens are an error rather than a fallback.
// ---------------------------------------------------------------------------

enum class Category : int {
  kGeometryImages = 0,
  kMedicalImages,
  kStatisticalCharts,
  kTextIntensiveImages,
  kFlowDiagrams,
  kMathematicalFormulas,
  kSpatialMaps,
  kNaturalScenes,
  kDailyObjects,
  kArtworks,
  kArchitecturalImages,
  kOthers,
};

inline constexpr int kNumCategories = 12;

struct CategoryInfo {
  Category value;
  std::string_view id;
  std::string_view display_name;
};

const std::array<CategoryInfo, kNumCategories>& all_categories();

std::string_view category_id(Category c);
std::string_view category_display_name(Category c);

/// Case-insensitive lookup by id. Throws InvariantError for unknown tokens:
/// the taxonomy is closed and "others" is a member, not a fallback.
Category parse_category(std::string_view token);

// ---------------------------------------------------------------------------
// Answers. One comparison routine shared by the validator, the diagnostic
// verifier, and reward computation, so "correct" means the same thing
// everywhere.
// ---------------------------------------------------------------------------

enum class AnswerKind { kExact, kNumeric, kChoice };

std::string_view answer_kind_id(AnswerKind k);
AnswerKind parse_answer_kind(std::string_view token);

struct NumericTolerance {
  double relative = 1e-4;
  double absolute = 1e-9;
};

/// Pulls the final answer out of a free-form response: the text after the
/// last "answer:"-style marker when present, otherwise the last non-empty
/// line.
std::string extract_final_answer(std::string_view response);

/// Mechanical correctness check under the answer kind.
///   exact   - trimmed, case-insensitive string equality
///   numeric - first number in each side within tolerance (units ignored)
///   choice  - single option letter, case-insensitive
bool compare_answers(std::string_view response, std::string_view reference, AnswerKind kind,
                     NumericTolerance tol = {});

/// First numeric literal in the text, if any.
std::optional<double> parse_leading_number(std::string_view text);

/// Single option letter ("B", "(b)", "B.") normalized to upper case.
std::optional<char> parse_option_letter(std::string_view text);

// ---------------------------------------------------------------------------
// Image assets: opaque references plus provenance. No pixel processing here.
// ---------------------------------------------------------------------------

enum class ImageSource { kLocalPath, kRemoteUrl };
enum class Provenance { kSeed, kSearched, kEdited, kComposed };

std::string_view image_source_id(ImageSource s);
ImageSource parse_image_source(std::string_view token);
std::string_view provenance_id(Provenance p);
Provenance parse_provenance(std::string_view token);

struct ImageAsset {
  ImageSource source = ImageSource::kRemoteUrl;
  std::string locator;
  std::optional<int> width;
  std::optional<int> height;
  Provenance provenance = Provenance::kSeed;
  std::vector<std::string> parent_locators;  // set for edited/composed assets

  json to_json() const;
  static ImageAsset from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Dataset records: one JSON object per line. Shared by the seed pool, the
// diagnostic pool, and generated training sets.
// ---------------------------------------------------------------------------

struct DatasetRecord {
  std::string id;
  ImageAsset image;
  std::string question;
  std::string answer;
  AnswerKind answer_kind = AnswerKind::kExact;
  Category category = Category::kOthers;
  json meta;

  json to_json() const;
  static DatasetRecord from_json(const json& j);
};

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& jsonl_path);
void save_dataset(const std::filesystem::path& jsonl_path, const std::vector<DatasetRecord>& records);

// ---------------------------------------------------------------------------
// Diagnostic instances and verdicts
// ---------------------------------------------------------------------------

struct DiagnosticInstance {
  std::string id;
  ImageAsset image;
  std::string question;
  std::string reference_answer;
  AnswerKind answer_kind = AnswerKind::kExact;
  Category category = Category::kOthers;

  static DiagnosticInstance from_record(const DatasetRecord& r);
};

struct StepAssessment {
  int step_index = 0;
  bool passed = false;
  std::string note;
};

/// Step-aware verdict. The scalar is binary on final-answer correctness;
/// step assessments feed failure attribution only.
struct Verdict {
  std::vector<StepAssessment> step_assessments;
  bool final_correct = false;

  int scalar() const { return final_correct ? 1 : 0; }
};

}  // namespace dpe::caps
