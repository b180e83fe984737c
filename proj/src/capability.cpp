#include "dpe/capability.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>

#include <nlohmann/json.hpp>

namespace dpe::caps {

namespace {

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

const std::array<CategoryInfo, kNumCategories>& all_categories() {
  static const std::array<CategoryInfo, kNumCategories> kCategories = {{
      {Category::kGeometryImages, "geometry-images", "Geometry images"},
      {Category::kMedicalImages, "medical-images", "Medical images"},
      {Category::kStatisticalCharts, "statistical-charts", "Statistical charts"},
      {Category::kTextIntensiveImages, "text-intensive-images", "Text-intensive images"},
      {Category::kFlowDiagrams, "flow-diagrams", "Flow diagrams"},
      {Category::kMathematicalFormulas, "mathematical-formulas", "Mathematical formulas"},
      {Category::kSpatialMaps, "spatial-maps", "Spatial maps"},
      {Category::kNaturalScenes, "natural-scenes", "Natural scenes"},
      {Category::kDailyObjects, "daily-objects", "Daily objects"},
      {Category::kArtworks, "artworks", "Artworks"},
      {Category::kArchitecturalImages, "architectural-images", "Architectural images"},
      {Category::kOthers, "others", "Others"},
  }};
  return kCategories;
}

std::string_view category_id(Category c) {
  return all_categories()[static_cast<std::size_t>(c)].id;
}

std::string_view category_display_name(Category c) {
  return all_categories()[static_cast<std::size_t>(c)].display_name;
}

Category parse_category(std::string_view token) {
  const std::string needle = to_lower(trim(token));
  for (const auto& info : all_categories()) {
    if (needle == info.id) return info.value;
  }
  throw InvariantError("unknown capability category: '" + std::string(token) + "'");
}

std::string_view answer_kind_id(AnswerKind k) {
  switch (k) {
    case AnswerKind::kExact: return "exact";
    case AnswerKind::kNumeric: return "numeric";
    case AnswerKind::kChoice: return "choice";
  }
  return "exact";
}

AnswerKind parse_answer_kind(std::string_view token) {
  const std::string needle = to_lower(trim(token));
  if (needle == "exact") return AnswerKind::kExact;
  if (needle == "numeric") return AnswerKind::kNumeric;
  if (needle == "choice") return AnswerKind::kChoice;
  throw InvariantError("unknown answer kind: '" + std::string(token) + "'");
}

std::string extract_final_answer(std::string_view response) {
  const std::string lowered = to_lower(response);
  static const std::array<std::string_view, 4> kMarkers = {"final answer:", "answer:",
                                                           "final answer is", "answer is"};
  std::size_t best = std::string::npos;
  std::size_t best_len = 0;
  for (auto marker : kMarkers) {
    std::size_t pos = lowered.rfind(marker);
    if (pos != std::string::npos && (best == std::string::npos || pos > best)) {
      best = pos;
      best_len = marker.size();
    }
  }
  if (best != std::string::npos) {
    std::string_view tail = response.substr(best + best_len);
    std::size_t eol = tail.find('\n');
    if (eol != std::string::npos) tail = tail.substr(0, eol);
    return std::string(trim(tail));
  }
  // Fall back to the last non-empty line.
  std::string_view rest = response;
  std::string last;
  while (!rest.empty()) {
    std::size_t eol = rest.find('\n');
    std::string_view line = eol == std::string::npos ? rest : rest.substr(0, eol);
    line = trim(line);
    if (!line.empty()) last = std::string(line);
    if (eol == std::string::npos) break;
    rest.remove_prefix(eol + 1);
  }
  return last;
}

std::optional<double> parse_leading_number(std::string_view text) {
  const std::string s(text);
  const char* p = s.c_str();
  const char* end = p + s.size();
  while (p != end) {
    if (std::isdigit(static_cast<unsigned char>(*p)) ||
        ((*p == '-' || *p == '+' || *p == '.') && p + 1 != end &&
         std::isdigit(static_cast<unsigned char>(p[1])))) {
      char* parsed_end = nullptr;
      double v = std::strtod(p, &parsed_end);
      if (parsed_end != p && std::isfinite(v)) return v;
    }
    ++p;
  }
  return std::nullopt;
}

std::optional<char> parse_option_letter(std::string_view text) {
  std::string_view t = trim(text);
  // Accept "B", "b", "(B)", "B)", "B." and the like.
  while (!t.empty() && (t.front() == '(' || t.front() == '[')) t.remove_prefix(1);
  if (t.empty()) return std::nullopt;
  char c = static_cast<char>(std::toupper(static_cast<unsigned char>(t.front())));
  if (c < 'A' || c > 'Z') return std::nullopt;
  t.remove_prefix(1);
  while (!t.empty() && (t.front() == ')' || t.front() == ']' || t.front() == '.')) t.remove_prefix(1);
  if (!trim(t).empty()) return std::nullopt;
  return c;
}

bool compare_answers(std::string_view response, std::string_view reference, AnswerKind kind,
                     NumericTolerance tol) {
  switch (kind) {
    case AnswerKind::kExact:
      return to_lower(trim(response)) == to_lower(trim(reference));
    case AnswerKind::kNumeric: {
      auto got = parse_leading_number(response);
      auto want = parse_leading_number(reference);
      if (!got || !want) return false;
      const double diff = std::fabs(*got - *want);
      return diff <= std::max(tol.absolute, tol.relative * std::fabs(*want));
    }
    case AnswerKind::kChoice: {
      auto got = parse_option_letter(extract_final_answer(response));
      auto want = parse_option_letter(reference);
      if (!got || !want) return false;
      return *got == *want;
    }
  }
  return false;
}

std::string_view image_source_id(ImageSource s) {
  return s == ImageSource::kLocalPath ? "local-path" : "remote-url";
}

ImageSource parse_image_source(std::string_view token) {
  const std::string needle = to_lower(trim(token));
  if (needle == "local-path") return ImageSource::kLocalPath;
  if (needle == "remote-url") return ImageSource::kRemoteUrl;
  throw InvariantError("unknown image source: '" + std::string(token) + "'");
}

std::string_view provenance_id(Provenance p) {
  switch (p) {
    case Provenance::kSeed: return "seed";
    case Provenance::kSearched: return "searched";
    case Provenance::kEdited: return "edited";
    case Provenance::kComposed: return "composed";
  }
  return "seed";
}

Provenance parse_provenance(std::string_view token) {
  const std::string needle = to_lower(trim(token));
  if (needle == "seed") return Provenance::kSeed;
  if (needle == "searched") return Provenance::kSearched;
  if (needle == "edited") return Provenance::kEdited;
  if (needle == "composed") return Provenance::kComposed;
  throw InvariantError("unknown provenance: '" + std::string(token) + "'");
}

json ImageAsset::to_json() const {
  return json{{"source", image_source_id(source)},
              {"locator", locator},
              {"provenance", provenance_id(provenance)}};
}

ImageAsset ImageAsset::from_json(const json& j) {
  ImageAsset a;
  a.source = parse_image_source(j.at("source").get<std::string>());
  a.locator = j.at("locator").get<std::string>();
  a.provenance = parse_provenance(j.at("provenance").get<std::string>());
  if (a.locator.empty()) throw InvariantError("image asset with empty locator");
  return a;
}

json DatasetRecord::to_json() const {
  json m = meta.is_null() ? json::object() : meta;
  if (!image.parent_locators.empty()) m["parents"] = image.parent_locators;
  return json{{"id", id},
              {"image", image.to_json()},
              {"question", question},
              {"answer", answer},
              {"answer_kind", answer_kind_id(answer_kind)},
              {"category", category_id(category)},
              {"meta", m}};
}

DatasetRecord DatasetRecord::from_json(const json& j) {
  DatasetRecord r;
  r.id = j.at("id").get<std::string>();
  r.image = ImageAsset::from_json(j.at("image"));
  r.question = j.at("question").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  r.answer_kind = parse_answer_kind(j.at("answer_kind").get<std::string>());
  r.category = parse_category(j.at("category").get<std::string>());
  r.meta = j.contains("meta") ? j.at("meta") : json::object();
  if (auto it = r.meta.find("parents"); it != r.meta.end() && it->is_array()) {
    for (const auto& p : *it) r.image.parent_locators.push_back(p.get<std::string>());
  }
  if (r.id.empty()) throw InvariantError("dataset record with empty id");
  if (r.answer.empty()) throw InvariantError("dataset record " + r.id + " has empty answer");
  return r;
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& jsonl_path) {
  std::vector<DatasetRecord> records;
  for (const auto& j : read_jsonl(jsonl_path)) {
    records.push_back(DatasetRecord::from_json(j));
  }
  return records;
}

void save_dataset(const std::filesystem::path& jsonl_path,
                  const std::vector<DatasetRecord>& records) {
  std::vector<json> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.to_json());
  write_jsonl(jsonl_path, out);
}

DiagnosticInstance DiagnosticInstance::from_record(const DatasetRecord& r) {
  DiagnosticInstance inst;
  inst.id = r.id;
  inst.image = r.image;
  inst.question = r.question;
  inst.reference_answer = r.answer;
  inst.answer_kind = r.answer_kind;
  inst.category = r.category;
  if (inst.reference_answer.empty()) {
    throw InvariantError("diagnostic instance " + inst.id + " has empty reference answer");
  }
  return inst;
}

}  // namespace dpe::caps
