/// @file agents.hpp
/// Client abstractions for every external service the pipeline touches:
/// chat completion (with image attachments), image search, image editing,
/// and embeddings. Two backends exist for each: an HTTP backend speaking a
/// chat-completions-style wire format, and a deterministic mock backend
/// keyed by request digests so that all-mock runs are byte-identical under
/// a fixed seed. No module outside this one constructs network requests.
#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "dpe/capability.hpp"
#include "dpe/common.hpp"
#include "dpe/synthetic_world.hpp"

namespace dpe::agents {

// ---------------------------------------------------------------------------
// Chat
// ---------------------------------------------------------------------------

struct ChatMessage {
  std::string role;  // "system" | "user" | "assistant"
  std::string text;
  std::vector<std::string> image_locators;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;
  std::uint64_t request_id = 0;  // assigned by next_request_id() when 0
};

struct ChatUsage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

struct ChatResponse {
  std::string text;
  std::string finish_reason = "stop";
  ChatUsage usage;
};

/// Process-unique, monotonically increasing request id.
std::uint64_t next_request_id();

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  /// Throws ClientError on transport failure; retriable() distinguishes
  /// timeouts and 5xx/429 from permanent failures.
  virtual ChatResponse chat(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Image search
// ---------------------------------------------------------------------------

struct SearchQuery {
  std::string text;
  std::vector<std::string> structural_tags;
  int top_k = 3;
};

struct SearchHit {
  std::string url;
  std::string title;
  int width = 0;
  int height = 0;
  long long bytes = 0;  // 0 when the provider does not report a size
};

struct SearchResult {
  std::vector<SearchHit> hits;  // ranked; size <= top_k
};

class SearchClient {
 public:
  virtual ~SearchClient() = default;
  /// Empty result lists are a value, not an error.
  virtual SearchResult search(const SearchQuery& query) = 0;
};

// ---------------------------------------------------------------------------
// Image edit / compose
// ---------------------------------------------------------------------------

class EditClient {
 public:
  virtual ~EditClient() = default;
  /// One input -> provenance "edited"; several inputs -> "composed".
  /// Parent locators are recorded on the returned asset in input order.
  virtual caps::ImageAsset edit(const std::string& instruction,
                                const std::vector<caps::ImageAsset>& inputs) = 0;
};

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

class EmbedClient {
 public:
  virtual ~EmbedClient() = default;
  virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& inputs,
                                                 const std::string& modality) = 0;
};

// ---------------------------------------------------------------------------
// Retry policy shared by the HTTP backends: exponential backoff on
// retriable transport errors only. Agent-content failures (unparseable
// output) are the caller's retry budget, not the transport's.
// ---------------------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 4;
  int base_delay_ms = 500;
  double factor = 2.0;
};

struct HttpConfig {
  std::string base_url;  // e.g. "http://localhost:8080/v1"
  std::string api_key;   // from environment, never from config files
  std::string model;
  double timeout_seconds = 60.0;
  RetryPolicy retry;
  int max_in_flight = 8;
};

std::unique_ptr<ChatClient> make_http_chat_client(const HttpConfig& config);
std::unique_ptr<SearchClient> make_http_search_client(const HttpConfig& config);
std::unique_ptr<EditClient> make_http_edit_client(const HttpConfig& config);
std::unique_ptr<EmbedClient> make_http_embed_client(const HttpConfig& config);

/// Environment variable names for credentials and endpoints.
inline constexpr const char* kEnvChatApiKey = "DPE_CHAT_API_KEY";
inline constexpr const char* kEnvChatBaseUrl = "DPE_CHAT_BASE_URL";
inline constexpr const char* kEnvSearchApiKey = "DPE_SEARCH_API_KEY";
inline constexpr const char* kEnvEditApiKey = "DPE_EDIT_API_KEY";

// ---------------------------------------------------------------------------
// Prompt context protocol. Agent prompts end with a fenced JSON block
// carrying the machine-readable context; the mock backend parses it and the
// HTTP prompts keep it for reproducibility.
// ---------------------------------------------------------------------------

std::string append_context_block(std::string prompt, const json& context);

/// Last fenced ```json block in the request's user messages, or null.
json extract_context_json(const ChatRequest& request);

/// Tolerant JSON extraction from agent responses: accepts bare JSON, fenced
/// blocks, or JSON embedded in prose. Returns null when nothing parses.
json parse_json_response(const std::string& text);

// ---------------------------------------------------------------------------
// Mock backend. One hub owns the synthetic world, the registered pools, and
// the adversarial knobs; clients are thin role views. All responses are
// keyed by (role, request digest, seed) so determinism survives concurrent
// callers.
// ---------------------------------------------------------------------------

enum class MockRole {
  kResponder,        // the model under diagnosis
  kStepVerifier,     // step assessments for scoring
  kAnalyst,          // failure attribution
  kPlanner,          // sample plans
  kImageClassifier,  // cheap structure check used by the image filter
  kGenerator,        // question/answer generation
  kValidator,        // category consistency + solvability gates
  kJudge,            // quality ratings
};

struct MockInjectionCounts {
  int wrong_category = 0;
  int unanswerable = 0;
  int missing_options = 0;
  int total() const { return wrong_category + unanswerable + missing_options; }
};

class MockHub {
 public:
  explicit MockHub(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  SyntheticWorld& world() { return world_; }
  const SyntheticWorld& world() const { return world_; }
  void set_world(const SyntheticWorld& w) { world_ = w; }

  /// Reference answers the mock responder looks up by instance id.
  void register_pool(const std::vector<caps::DiagnosticInstance>& instances);

  /// Fraction of generator outputs deliberately malformed (wrong category,
  /// unanswerable, or missing options), on a digest-keyed schedule.
  void set_generator_malformed_rate(double rate);
  MockInjectionCounts injection_counts() const;

  std::shared_ptr<ChatClient> chat_client(MockRole role, int judge_index = 0);
  std::shared_ptr<SearchClient> search_client();
  std::shared_ptr<EditClient> edit_client();
  std::shared_ptr<EmbedClient> embed_client();

 private:
  friend class MockChatClient;
  friend class MockSearchClient;
  friend class MockEditClient;
  friend class MockEmbedClient;

  struct PoolEntry {
    std::string reference_answer;
    caps::AnswerKind answer_kind;
    caps::Category category;
  };

  std::uint64_t seed_;
  SyntheticWorld world_;
  std::map<std::string, PoolEntry> pool_;
  double generator_malformed_rate_ = 0.0;
  MockInjectionCounts injections_;
  mutable std::mutex mutex_;
};

/// Deterministic unit-norm pseudo-embedding derived from a content digest.
std::vector<double> digest_embedding(std::string_view content, int dimension);

/// Deterministic incorrect answer of the same kind as the reference; used by
/// the mock responder and the synthetic rollout policy.
std::string mock_wrong_answer(const std::string& reference, caps::AnswerKind kind);

}  // namespace dpe::agents
