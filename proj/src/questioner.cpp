#include "dpe/questioner.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <iostream>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

namespace dpe::questioner {

std::string_view question_kind_id(QuestionKind k) {
  switch (k) {
    case QuestionKind::kMultipleChoice: return "multiple-choice";
    case QuestionKind::kNumeric: return "numeric";
    case QuestionKind::kShortText: return "short-text";
  }
  return "short-text";
}

QuestionKind parse_question_kind(std::string_view token) {
  if (token == "multiple-choice") return QuestionKind::kMultipleChoice;
  if (token == "numeric") return QuestionKind::kNumeric;
  if (token == "short-text") return QuestionKind::kShortText;
  throw InvariantError("unknown question kind: '" + std::string(token) + "'");
}

caps::AnswerKind expected_answer_kind(QuestionKind k) {
  switch (k) {
    case QuestionKind::kMultipleChoice: return caps::AnswerKind::kChoice;
    case QuestionKind::kNumeric: return caps::AnswerKind::kNumeric;
    case QuestionKind::kShortText: return caps::AnswerKind::kExact;
  }
  return caps::AnswerKind::kExact;
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

GenerationPlan plan_for_slot(const diagnosis::DiagnosticReport& report, caps::Category category,
                             int slot_index, int attempt, int iteration,
                             agents::ChatClient& planner) {
  const auto& failure = report.failures_for(category);
  const auto& hint = report.hints_for(category);

  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  std::string prompt =
      "Plan one training sample for the given capability category. Fill the image requirement "
      "(free text, then '; tags:<tag1>,<tag2>', optionally '; compose:<n>' or '; edit:<hint>'), "
      "the question kind (multiple-choice | numeric | short-text), whether a unit is required, "
      "whether structured output is required, the answer format (option-letter | number | "
      "number-with-unit | short-phrase), and a direction sentence targeting the listed "
      "weaknesses. Return JSON {\"image_req\", \"question_kind\", \"unit_required\", "
      "\"structured_output\", \"answer_format\", \"direction\"}.";
  if (attempt > 1) {
    prompt += " A previous candidate for this slot was rejected; vary the plan.";
  }
  prompt = agents::append_context_block(
      std::move(prompt), json{{"kind", "plan-request"},
                              {"iteration", iteration},
                              {"category", caps::category_id(category)},
                              {"slot", slot_index},
                              {"attempt", attempt},
                              {"patterns", failure.patterns},
                              {"directives", hint.directives}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {}});

  const json parsed = agents::parse_json_response(planner.chat(req).text);
  if (parsed.is_null()) throw ClientError("planner returned no parseable plan");
  GenerationPlan plan;
  plan.category = category;
  plan.slot_index = slot_index;
  plan.attempt = attempt;
  plan.iteration = iteration;
  try {
    plan.image_req = parsed.at("image_req").get<std::string>();
    plan.question_kind = parse_question_kind(parsed.at("question_kind").get<std::string>());
    plan.unit_required = parsed.value("unit_required", false);
    plan.structured_output = parsed.value("structured_output", false);
    plan.answer_format_req = parsed.at("answer_format").get<std::string>();
    plan.direction = parsed.at("direction").get<std::string>();
  } catch (const json::exception& e) {
    throw ClientError(std::string("plan does not fit the schema: ") + e.what());
  }
  if (plan.image_req.empty() || plan.answer_format_req.empty() || plan.direction.empty()) {
    throw ClientError("plan with empty requirement fields");
  }
  return plan;
}

std::optional<std::pair<quota::ReservationToken, GenerationPlan>> plan_next(
    const diagnosis::DiagnosticReport& report, quota::QuotaLedger& ledger,
    agents::ChatClient& planner, Rng& rng,
    const std::array<int, caps::kNumCategories>& shortfall_by_category) {
  for (int round = 0; round < 64; ++round) {
    std::array<double, caps::kNumCategories> weights{};
    bool any = false;
    for (int c = 0; c < caps::kNumCategories; ++c) {
      const auto cat = static_cast<caps::Category>(c);
      const int avail = ledger.deficit(cat) - shortfall_by_category[c];
      weights[c] = avail > 0 ? static_cast<double>(avail) : 0.0;
      any = any || avail > 0;
    }
    if (!any) return std::nullopt;
    const auto cat = static_cast<caps::Category>(rng.weighted(weights));
    auto token = ledger.reserve(cat);
    if (!token) continue;  // raced with another reservation; redraw

    for (int attempt_planner = 1;; ++attempt_planner) {
      try {
        auto plan = plan_for_slot(report, cat, token->slot_index(), 1, report.iteration, planner);
        return std::make_pair(std::move(*token), std::move(plan));
      } catch (const ClientError&) {
        if (attempt_planner >= 3) {
          ledger.release(std::move(*token));
          throw;
        }
      }
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Image selection
// ---------------------------------------------------------------------------

namespace {

std::string trim_copy(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

struct ImageRequirement {
  std::string phrase;
  std::vector<std::string> tags;
  int compose_count = 0;      // >= 2 requests a composition
  std::string edit_hint;      // non-empty requests an edit
};

ImageRequirement parse_image_req(const std::string& req) {
  ImageRequirement out;
  std::size_t start = 0;
  bool first = true;
  while (start <= req.size()) {
    std::size_t end = req.find(';', start);
    std::string piece = trim_copy(
        std::string_view(req).substr(start, end == std::string::npos ? req.size() - start : end - start));
    if (first) {
      out.phrase = piece;
      first = false;
    } else if (piece.rfind("tags:", 0) == 0) {
      std::string list = piece.substr(5);
      std::size_t p = 0;
      while (p <= list.size()) {
        std::size_t comma = list.find(',', p);
        std::string tag =
            trim_copy(std::string_view(list).substr(p, comma == std::string::npos ? list.size() - p
                                                                                  : comma - p));
        if (!tag.empty()) out.tags.push_back(tag);
        if (comma == std::string::npos) break;
        p = comma + 1;
      }
    } else if (piece.rfind("compose:", 0) == 0) {
      out.compose_count = std::max(0, std::atoi(piece.c_str() + 8));
    } else if (piece.rfind("edit:", 0) == 0) {
      out.edit_hint = trim_copy(piece.substr(5));
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  if (out.phrase.empty()) out.phrase = req;
  return out;
}

bool passes_basic_filter(const agents::SearchHit& hit, const ImageFilterConfig& cfg) {
  if (hit.width > 0 && hit.height > 0 &&
      (hit.width < cfg.min_width || hit.height < cfg.min_height)) {
    return false;
  }
  if (hit.bytes > 0 && hit.bytes > cfg.max_bytes) return false;
  return true;
}

bool passes_structure_check(const agents::SearchHit& hit, const std::vector<std::string>& tags,
                            agents::ChatClient* classifier) {
  if (classifier == nullptr || tags.empty()) return true;
  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  std::string prompt =
      "Does the search hit plausibly contain the required structure? Return JSON "
      "{\"match\": true|false}.";
  prompt = agents::append_context_block(std::move(prompt),
                                        json{{"kind", "structure-check"},
                                             {"required_tags", tags},
                                             {"candidate_title", hit.title},
                                             {"candidate_url", hit.url}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {}});
  try {
    const json parsed = agents::parse_json_response(classifier->chat(req).text);
    return parsed.value("match", false);
  } catch (const ClientError&) {
    // Degraded mode: the validation agent remains the category safety net.
    return true;
  }
}

caps::ImageAsset asset_from_hit(const agents::SearchHit& hit) {
  caps::ImageAsset a;
  a.source = caps::ImageSource::kRemoteUrl;
  a.locator = hit.url;
  if (hit.width > 0) a.width = hit.width;
  if (hit.height > 0) a.height = hit.height;
  a.provenance = caps::Provenance::kSearched;
  return a;
}

}  // namespace

caps::ImageAsset select_image(const GenerationPlan& plan, agents::SearchClient& search,
                              agents::EditClient& editor, agents::ChatClient* classifier,
                              const ImageFilterConfig& filter) {
  if (plan.image_req.empty()) throw InvariantError("plan has an empty image requirement");
  const ImageRequirement req = parse_image_req(plan.image_req);
  const int needed = std::max(1, req.compose_count);

  std::vector<caps::ImageAsset> survivors;
  std::set<std::string> seen_urls;
  const std::array<std::string, 2> queries = {
      req.phrase, std::string(caps::category_id(plan.category)) + " " + req.phrase};
  for (const auto& query_text : queries) {
    agents::SearchQuery query;
    query.text = query_text;
    query.structural_tags = req.tags;
    query.top_k = filter.top_k;
    const auto result = search.search(query);
    for (const auto& hit : result.hits) {
      if (!seen_urls.insert(hit.url).second) continue;
      if (!passes_basic_filter(hit, filter)) continue;
      if (!passes_structure_check(hit, req.tags, classifier)) continue;
      survivors.push_back(asset_from_hit(hit));
      if (static_cast<int>(survivors.size()) >= needed) break;
    }
    if (static_cast<int>(survivors.size()) >= needed) break;
  }
  if (static_cast<int>(survivors.size()) < needed) {
    throw NoCandidateError("no image candidate survives filtering for '" + req.phrase + "'");
  }

  if (req.compose_count >= 2) {
    std::vector<caps::ImageAsset> inputs(survivors.begin(), survivors.begin() + needed);
    return editor.edit("compose: stitch the inputs side by side; " + plan.image_req, inputs);
  }
  if (!req.edit_hint.empty()) {
    return editor.edit("edit: " + req.edit_hint + "; " + plan.direction, {survivors.front()});
  }
  return survivors.front();
}

// ---------------------------------------------------------------------------
// Question generation
// ---------------------------------------------------------------------------

GeneratedQuestion generate_question(const caps::ImageAsset& image, const GenerationPlan& plan,
                                    const diagnosis::GenerationHint& hints,
                                    agents::ChatClient& generator) {
  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  std::string prompt =
      "Write one question about the attached image together with its reference answer, following "
      "the question kind, answer format, and direction in the context. Multiple-choice questions "
      "must include the labeled option set in the question text, and the answer must be "
      "mechanically checkable. Return JSON {\"question\", \"answer\", \"answer_kind\" (exact | "
      "numeric | choice), \"depicts\" (the capability category the image content belongs to)}.";
  json directives = json::array();
  for (std::size_t i = 0; i < hints.directives.size() && i < 3; ++i) {
    directives.push_back(hints.directives[i]);
  }
  prompt = agents::append_context_block(
      std::move(prompt), json{{"kind", "generate-question"},
                              {"iteration", plan.iteration},
                              {"category", caps::category_id(plan.category)},
                              {"slot", plan.slot_index},
                              {"attempt", plan.attempt},
                              {"image_locator", image.locator},
                              {"question_kind", question_kind_id(plan.question_kind)},
                              {"unit_required", plan.unit_required},
                              {"answer_format", plan.answer_format_req},
                              {"direction", plan.direction},
                              {"hints", directives}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {image.locator}});

  const json parsed = agents::parse_json_response(generator.chat(req).text);
  if (parsed.is_null()) throw GenerationParseError("generator returned no parseable JSON");
  GeneratedQuestion out;
  try {
    out.question = parsed.at("question").get<std::string>();
    out.answer = parsed.at("answer").get<std::string>();
    out.answer_kind = caps::parse_answer_kind(parsed.at("answer_kind").get<std::string>());
    out.depicts = parsed.value("depicts", std::string(caps::category_id(plan.category)));
  } catch (const json::exception& e) {
    throw GenerationParseError(std::string("generator output does not fit the schema: ") + e.what());
  } catch (const InvariantError& e) {
    throw GenerationParseError(std::string("generator output invalid: ") + e.what());
  }
  if (out.question.empty() || out.answer.empty()) {
    throw GenerationParseError("generator produced an empty question or answer");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

namespace {

std::set<char> option_letters(const std::string& question) {
  std::set<char> letters;
  for (std::size_t i = 0; i + 2 < question.size(); ++i) {
    if (question[i] == '(' && question[i + 2] == ')' &&
        question[i + 1] >= 'A' && question[i + 1] <= 'Z') {
      letters.insert(question[i + 1]);
    }
  }
  return letters;
}

bool has_unit_suffix(const std::string& answer) {
  const std::string s = trim_copy(answer);
  const char* begin = s.c_str();
  char* end = nullptr;
  std::strtod(begin, &end);
  if (end == begin) return false;
  std::string_view rest(end);
  while (!rest.empty() && std::isspace(static_cast<unsigned char>(rest.front()))) {
    rest.remove_prefix(1);
  }
  return !rest.empty() && std::isalpha(static_cast<unsigned char>(rest.front()));
}

}  // namespace

bool check_verifiability(const CandidateSample& candidate) {
  switch (candidate.answer_kind) {
    case caps::AnswerKind::kNumeric:
      return caps::parse_leading_number(candidate.answer).has_value();
    case caps::AnswerKind::kChoice:
      return caps::parse_option_letter(candidate.answer).has_value();
    case caps::AnswerKind::kExact:
      return !trim_copy(candidate.answer).empty();
  }
  return false;
}

bool check_format(const CandidateSample& candidate) {
  const auto& plan = candidate.plan;
  if (candidate.answer_kind != expected_answer_kind(plan.question_kind)) return false;

  if (plan.question_kind == QuestionKind::kMultipleChoice) {
    const auto letters = option_letters(candidate.question);
    if (letters.size() < 2) return false;  // a choice question needs its option set
    const auto answer = caps::parse_option_letter(candidate.answer);
    if (!answer || letters.find(*answer) == letters.end()) return false;
  }
  if (plan.question_kind == QuestionKind::kNumeric && plan.unit_required &&
      !has_unit_suffix(candidate.answer)) {
    return false;
  }

  const std::string& fmt = plan.answer_format_req;
  if (fmt == "option-letter") {
    return caps::parse_option_letter(candidate.answer).has_value();
  }
  if (fmt == "number") {
    return caps::parse_leading_number(candidate.answer).has_value();
  }
  if (fmt == "number-with-unit") {
    return has_unit_suffix(candidate.answer);
  }
  if (fmt == "short-phrase") {
    const std::string t = trim_copy(candidate.answer);
    return !t.empty() && t.size() <= 80;
  }
  return true;  // free-form format constraints carry no extra mechanical check
}

CandidateSample validate(CandidateSample candidate, agents::ChatClient& validator) {
  candidate.gates.verifiable = check_verifiability(candidate);
  candidate.gates.format_ok = check_format(candidate);

  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  std::string prompt =
      "Check the candidate training sample: (1) does the image/question pair match the planned "
      "capability category? (2) is the question answerable from the image alone with complete "
      "information? Return JSON {\"category_match\": true|false, \"solvable\": true|false}.";
  prompt = agents::append_context_block(
      std::move(prompt),
      json{{"kind", "validate-candidate"},
           {"planned_category", caps::category_id(candidate.plan.category)},
           {"question", candidate.question},
           {"answer", candidate.answer},
           {"answer_kind", caps::answer_kind_id(candidate.answer_kind)},
           {"depicts", candidate.depicts.empty()
                           ? std::string(caps::category_id(candidate.plan.category))
                           : candidate.depicts},
           {"image_locator", candidate.image.locator}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {candidate.image.locator}});
  try {
    const json parsed = agents::parse_json_response(validator.chat(req).text);
    candidate.gates.category_ok = parsed.value("category_match", false);
    candidate.gates.solvable = parsed.value("solvable", false);
    candidate.gates.validated = true;
  } catch (const ClientError&) {
    candidate.gates.validated = false;
    candidate.gates.category_ok = false;
    candidate.gates.solvable = false;
  }
  return candidate;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

json GenerationManifest::to_json() const {
  json mixture_json = json::object();
  for (const auto& info : caps::all_categories()) {
    mixture_json[std::string(info.id)] = mixture.weights[static_cast<std::size_t>(info.value)];
  }
  json shortfall_json = json::object();
  for (const auto& info : caps::all_categories()) {
    const int v = shortfall[static_cast<std::size_t>(info.value)];
    if (v > 0) shortfall_json[std::string(info.id)] = v;
  }
  return json{{"schema_version", std::string(kSchemaVersion)},
              {"kind", "generation-manifest"},
              {"iteration", iteration},
              {"budget", budget},
              {"mixture", mixture_json},
              {"accepted", accepted},
              {"rejected", rejected},
              {"shortfall", shortfall_json},
              {"gate_reject_histogram", json{{"cat", gate_rejects.cat},
                                             {"sol", gate_rejects.sol},
                                             {"ver", gate_rejects.ver},
                                             {"fmt", gate_rejects.fmt}}}};
}

// ---------------------------------------------------------------------------
// Full generation loop
// ---------------------------------------------------------------------------

namespace {

std::string record_id(int iteration, caps::Category category, int slot) {
  return "gen-" + std::to_string(iteration) + "-" + std::string(caps::category_id(category)) + "-s" +
         std::to_string(slot);
}

}  // namespace

GenerationOutcome generate_dataset(const diagnosis::DiagnosticReport& report, long long budget,
                                   const AgentClients& clients, const GenerationConfig& config) {
  if (!clients.planner || !clients.generator || !clients.validator || !clients.search ||
      !clients.editor) {
    throw ConfigError("generation requires planner, generator, validator, search, and editor");
  }
  if (config.retry_budget < 0) throw ConfigError("retry budget must be >= 0");

  quota::QuotaLedger ledger(report.mixture, budget);

  struct Shared {
    std::mutex mu;
    Rng rng;
    std::array<int, caps::kNumCategories> shortfall{};
    std::set<std::uint64_t> question_hashes;
    std::vector<std::pair<std::pair<int, int>, caps::DatasetRecord>> outputs;
    GenerationManifest manifest;
    int accepted_count = 0;
    std::atomic<long long> plan_counter{0};
    std::atomic<bool> stop{false};
    std::exception_ptr fatal;
    explicit Shared(std::uint64_t seed) : rng(mix64(seed, fnv1a64("plan-category"))) {}
  } shared(config.seed);

  shared.manifest.iteration = report.iteration;
  shared.manifest.budget = budget;
  shared.manifest.mixture = report.mixture;

  const auto worker = [&] {
    while (!shared.stop.load()) {
      std::optional<std::pair<quota::ReservationToken, GenerationPlan>> next;
      {
        std::lock_guard<std::mutex> lock(shared.mu);
        try {
          next = plan_next(report, ledger, *clients.planner, shared.rng, shared.shortfall);
        } catch (...) {
          shared.fatal = std::current_exception();
          shared.stop.store(true);
          return;
        }
      }
      if (!next) {
        bool in_flight = false;
        for (int c = 0; c < caps::kNumCategories && !in_flight; ++c) {
          in_flight = ledger.reserved(static_cast<caps::Category>(c)) > 0;
        }
        if (!in_flight) return;
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
        continue;
      }

      auto token = std::move(next->first);
      GenerationPlan plan = std::move(next->second);
      plan.sample_index = shared.plan_counter.fetch_add(1);
      bool committed = false;

      for (int attempt = 1; attempt <= config.retry_budget && !committed; ++attempt) {
        if (attempt > 1) {
          try {
            plan = plan_for_slot(report, token.category(), token.slot_index(), attempt,
                                 report.iteration, *clients.planner);
          } catch (const ClientError&) {
            std::lock_guard<std::mutex> lock(shared.mu);
            ++shared.manifest.rejected;
            continue;
          }
        }
        CandidateSample candidate;
        try {
          candidate.image = select_image(plan, *clients.search, *clients.editor,
                                         clients.image_classifier.get(), config.image_filter);
          auto generated =
              generate_question(candidate.image, plan, report.hints_for(plan.category),
                                *clients.generator);
          candidate.plan = plan;
          candidate.category = plan.category;
          candidate.question = std::move(generated.question);
          candidate.answer = std::move(generated.answer);
          candidate.answer_kind = generated.answer_kind;
          candidate.depicts = std::move(generated.depicts);
        } catch (const ClientError&) {
          std::lock_guard<std::mutex> lock(shared.mu);
          ++shared.manifest.rejected;
          continue;
        }
        candidate = validate(std::move(candidate), *clients.validator);

        std::lock_guard<std::mutex> lock(shared.mu);
        bool duplicate = false;
        if (candidate.gates.accepted() && config.dedup_questions) {
          duplicate = !shared.question_hashes.insert(fnv1a64(candidate.question)).second;
        }
        if (candidate.gates.accepted() && !duplicate) {
          caps::DatasetRecord rec;
          rec.id = record_id(report.iteration, token.category(), token.slot_index());
          rec.image = candidate.image;
          rec.question = candidate.question;
          rec.answer = candidate.answer;
          rec.answer_kind = candidate.answer_kind;
          rec.category = candidate.category;
          rec.meta = json{{"iteration", report.iteration},
                          {"slot", token.slot_index()},
                          {"attempt", attempt},
                          {"question_kind", question_kind_id(plan.question_kind)},
                          {"direction", plan.direction},
                          {"gates", json{{"cat", 1}, {"sol", 1}, {"ver", 1}, {"fmt", 1}}}};
          shared.outputs.emplace_back(
              std::make_pair(static_cast<int>(token.category()), token.slot_index()),
              std::move(rec));
          ++shared.accepted_count;
          if (config.progress_every > 0 && shared.accepted_count % config.progress_every == 0) {
            std::cerr << "[dpe] generate: accepted " << shared.accepted_count << "/" << budget
                      << " (rejected " << shared.manifest.rejected << ")\n";
          }
          committed = true;
        } else {
          ++shared.manifest.rejected;
          const auto& g = candidate.gates;
          if (g.validated && !duplicate) {
            if (!g.category_ok) ++shared.manifest.gate_rejects.cat;
            else if (!g.solvable) ++shared.manifest.gate_rejects.sol;
            else if (!g.verifiable) ++shared.manifest.gate_rejects.ver;
            else if (!g.format_ok) ++shared.manifest.gate_rejects.fmt;
          }
        }
      }

      if (committed) {
        ledger.commit(std::move(token));
      } else {
        // Shortfall is recorded while the reservation is still held;
        // otherwise another worker could re-reserve the released capacity
        // before the forfeit becomes visible and the accounting identity
        // committed + shortfall == target would break.
        {
          std::lock_guard<std::mutex> lock(shared.mu);
          ++shared.shortfall[static_cast<std::size_t>(token.category())];
        }
        ledger.release(std::move(token));
      }
    }
  };

  const int workers = std::max(1, config.concurrency);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (shared.fatal) std::rethrow_exception(shared.fatal);

  std::sort(shared.outputs.begin(), shared.outputs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  GenerationOutcome outcome;
  outcome.manifest = std::move(shared.manifest);
  outcome.manifest.shortfall = shared.shortfall;
  outcome.manifest.accepted = static_cast<int>(shared.outputs.size());
  outcome.records.reserve(shared.outputs.size());
  for (auto& [key, rec] : shared.outputs) outcome.records.push_back(std::move(rec));
  return outcome;
}

}  // namespace dpe::questioner
