/// @file questioner.hpp
/// The multi-agent generation pipeline: Planner -> Image Selector ->
/// Question Generator -> Validation, producing a quota-exact, quality-gated
/// training set. Candidate pipelines may run concurrently; the quota ledger
/// is the only synchronization point, and candidate content is derived from
/// (iteration, category, slot, attempt) so output is independent of
/// scheduling.
#pragma once

#include <memory>

#include "dpe/agents.hpp"
#include "dpe/capability.hpp"
#include "dpe/common.hpp"
#include "dpe/diagnosis.hpp"
#include "dpe/quota.hpp"

namespace dpe::questioner {

// ---------------------------------------------------------------------------
// Plans and candidates
// ---------------------------------------------------------------------------

enum class QuestionKind { kMultipleChoice, kNumeric, kShortText };

std::string_view question_kind_id(QuestionKind k);
QuestionKind parse_question_kind(std::string_view token);

/// Answer kind each question kind must produce.
caps::AnswerKind expected_answer_kind(QuestionKind k);

struct GenerationPlan {
  long long sample_index = 0;  // global plan ordinal, informational
  caps::Category category = caps::Category::kOthers;
  int slot_index = 0;  // per-category quota slot
  int attempt = 1;     // 1-based attempt within the slot
  int iteration = 0;
  std::string image_req;
  QuestionKind question_kind = QuestionKind::kShortText;
  bool unit_required = false;
  bool structured_output = false;
  std::string answer_format_req;
  std::string direction;
};

struct GateResults {
  bool category_ok = false;   // g_cat: image/question matches the planned category
  bool solvable = false;      // g_sol: answerable from the image alone
  bool verifiable = false;    // g_ver: answer mechanically checkable
  bool format_ok = false;     // g_fmt: matches the required answer format
  bool validated = false;     // false when the validator itself failed

  bool accepted() const { return validated && category_ok && solvable && verifiable && format_ok; }
};

struct CandidateSample {
  GenerationPlan plan;
  caps::ImageAsset image;
  std::string question;
  std::string answer;
  caps::AnswerKind answer_kind = caps::AnswerKind::kExact;
  caps::Category category = caps::Category::kOthers;
  std::string depicts;  // generator's own claim of the content category
  GateResults gates;
};

// ---------------------------------------------------------------------------
// Clients and configuration
// ---------------------------------------------------------------------------

struct AgentClients {
  std::shared_ptr<agents::ChatClient> planner;
  std::shared_ptr<agents::ChatClient> generator;
  std::shared_ptr<agents::ChatClient> validator;
  std::shared_ptr<agents::ChatClient> image_classifier;  // optional structure check
  std::shared_ptr<agents::SearchClient> search;
  std::shared_ptr<agents::EditClient> editor;
};

struct ImageFilterConfig {
  int min_width = 224;
  int min_height = 224;
  long long max_bytes = 8ll * 1024 * 1024;
  int top_k = 3;
};

struct GenerationConfig {
  int retry_budget = 5;  // attempts per quota slot before shortfall
  ImageFilterConfig image_filter;
  int concurrency = 1;
  std::uint64_t seed = 0;
  bool dedup_questions = true;  // exact question-text hash
  int progress_every = 50;      // accepted samples per progress line; 0 disables
};

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// Selects an unsaturated category weighted by remaining deficit, reserves a
/// slot, and asks the planner to fill the requirement fields. Returns
/// nullopt when no category has plannable capacity left. shortfall_by_category
/// counts slots already forfeited by the caller's retry policy.
std::optional<std::pair<quota::ReservationToken, GenerationPlan>> plan_next(
    const diagnosis::DiagnosticReport& report, quota::QuotaLedger& ledger,
    agents::ChatClient& planner, Rng& rng,
    const std::array<int, caps::kNumCategories>& shortfall_by_category = {});

/// Re-plans the same slot for a later attempt.
GenerationPlan plan_for_slot(const diagnosis::DiagnosticReport& report, caps::Category category,
                             int slot_index, int attempt, int iteration,
                             agents::ChatClient& planner);

/// Search -> filter -> optional edit/compose. Throws NoCandidateError when
/// every query is exhausted without a surviving candidate.
caps::ImageAsset select_image(const GenerationPlan& plan, agents::SearchClient& search,
                              agents::EditClient& editor, agents::ChatClient* classifier,
                              const ImageFilterConfig& filter);

struct NoCandidateError : ClientError {
  explicit NoCandidateError(const std::string& what) : ClientError(what, false) {}
};

struct GeneratedQuestion {
  std::string question;
  std::string answer;
  caps::AnswerKind answer_kind = caps::AnswerKind::kExact;
  std::string depicts;
};

struct GenerationParseError : ClientError {
  explicit GenerationParseError(const std::string& what) : ClientError(what, false) {}
};

/// Asks the generator for (question, answer, answer_kind) under the plan's
/// requirements and the category's hints. Throws GenerationParseError when
/// the output does not fit the schema.
GeneratedQuestion generate_question(const caps::ImageAsset& image, const GenerationPlan& plan,
                                    const diagnosis::GenerationHint& hints,
                                    agents::ChatClient& generator);

/// Local mechanical gates (no agent involved).
bool check_verifiability(const CandidateSample& candidate);
bool check_format(const CandidateSample& candidate);

/// Fills all four gates: g_cat and g_sol from the validation agent, g_ver
/// and g_fmt from the local checks. A validator transport failure leaves the
/// candidate unvalidated (rejected, no gate attribution).
CandidateSample validate(CandidateSample candidate, agents::ChatClient& validator);

// ---------------------------------------------------------------------------
// Full generation
// ---------------------------------------------------------------------------

struct GateRejectHistogram {
  int cat = 0;
  int sol = 0;
  int ver = 0;
  int fmt = 0;
  int total() const { return cat + sol + ver + fmt; }
};

struct GenerationManifest {
  int iteration = 0;
  long long budget = 0;
  diagnosis::MixtureVector mixture;
  int accepted = 0;
  int rejected = 0;  // failed attempts: gate rejections, parse failures, dedup hits
  std::array<int, caps::kNumCategories> shortfall{};
  GateRejectHistogram gate_rejects;

  json to_json() const;
};

struct GenerationOutcome {
  std::vector<caps::DatasetRecord> records;  // sorted by (category, slot)
  GenerationManifest manifest;
};

/// Drives plan -> select -> generate -> validate until every quota slot is
/// committed or forfeited after the retry budget. On full saturation the
/// per-category record counts equal the quota targets exactly; otherwise the
/// manifest reports the shortfall explicitly (never a silent rebalance).
GenerationOutcome generate_dataset(const diagnosis::DiagnosticReport& report, long long budget,
                                   const AgentClients& clients, const GenerationConfig& config);

}  // namespace dpe::questioner
