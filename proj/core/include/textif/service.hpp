#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "textif/checkpoint.hpp"
#include "textif/text_guidance.hpp"

namespace httplib {
class Server;
}

namespace textif {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Accepts an optional "data:...;base64," prefix and embedded whitespace.
/// Throws InvalidInput on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

struct ServiceConfig {
  std::size_t max_request_bytes = 4u << 20;
  std::size_t history_limit = 100;
  std::string cors_origin = "*";
};

struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;  // names lowercased
  std::string body;
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
  std::map<std::string, std::string> headers;
};

struct HistoryEntry {
  std::string prompt;
  std::string task;
  std::string timestamp;  // ISO-8601 UTC
};

/// Transport-independent request handling for the fusion API:
///   POST /api/fuse, GET /api/tasks, GET /api/history?session_id=...
/// Model state is read-only after construction; handle() may run
/// concurrently.
class FusionService {
 public:
  FusionService(std::optional<Checkpoint> checkpoint, TaskCatalog catalog,
                std::shared_ptr<const TextEmbedder> embedder, ServiceConfig cfg = {});

  HttpResponse handle(const HttpRequest& req);

  bool has_model() const { return checkpoint_.has_value(); }
  const ServiceConfig& config() const { return cfg_; }
  std::vector<HistoryEntry> history(const std::string& session_id) const;

 private:
  HttpResponse fuse(const HttpRequest& req);
  HttpResponse tasks() const;
  HttpResponse history_route(const HttpRequest& req) const;
  void record(const std::string& session, HistoryEntry entry);

  std::optional<Checkpoint> checkpoint_;
  TaskCatalog catalog_;
  std::shared_ptr<const TextEmbedder> embedder_;
  ServiceConfig cfg_;
  mutable std::mutex history_mutex_;
  std::map<std::string, std::deque<HistoryEntry>> history_;
};

/// Routes every /api request of `server` to `service`.
void mount(httplib::Server& server, FusionService& service);

}  // namespace textif
