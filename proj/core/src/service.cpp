#include "textif/service.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <ctime>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "textif/error.hpp"
#include "textif/image_io.hpp"
#include "textif/metrics.hpp"
#include "textif/trainer.hpp"

namespace textif {

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return {};
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.starts_with("data:")) {
    const auto comma = text.find(',');
    if (comma == std::string_view::npos || text.substr(0, comma).find(";base64") ==
                                               std::string_view::npos) {
      throw InvalidInput("data URL is not base64");
    }
    text.remove_prefix(comma + 1);
  }
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  }
  if (clean.empty()) throw InvalidInput("empty base64 payload");
  if (clean.size() % 4 != 0) throw InvalidInput("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw InvalidInput("malformed base64");
  std::size_t pad = 0;
  if (clean.back() == '=') ++pad;
  if (clean.size() >= 2 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

namespace {

HttpResponse json_response(int status, const nlohmann::json& body) {
  HttpResponse r;
  r.status = status;
  r.body = body.dump();
  return r;
}

HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

std::string utc_timestamp() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const std::time_t t = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string next_request_id() {
  static std::atomic<std::uint64_t> counter{0};
  return "req-" + std::to_string(++counter);
}

std::string get_string(const nlohmann::json& j, const char* key, bool required) {
  if (!j.contains(key)) {
    if (required) throw InvalidInput(std::string("missing field '") + key + "'");
    return {};
  }
  if (!j.at(key).is_string()) throw InvalidInput(std::string("field '") + key + "' must be a string");
  return j.at(key).get<std::string>();
}

Image decode_field(const nlohmann::json& j, const char* key) {
  try {
    return decode_image(base64_decode(get_string(j, key, true)));
  } catch (const InvalidInput& e) {
    throw InvalidInput(std::string(key) + ": " + e.what());
  } catch (const Error& e) {
    throw InvalidInput(std::string(key) + ": undecodable image: " + e.what());
  }
}

}  // namespace

FusionService::FusionService(std::optional<Checkpoint> checkpoint, TaskCatalog catalog,
                             std::shared_ptr<const TextEmbedder> embedder, ServiceConfig cfg)
    : checkpoint_(std::move(checkpoint)), catalog_(std::move(catalog)),
      embedder_(std::move(embedder)), cfg_(std::move(cfg)) {
  if (!embedder_) throw ConfigError("service needs a text embedder");
  if (checkpoint_ && checkpoint_->config.embed_dim != embedder_->dim()) {
    throw ConfigError("checkpoint embed_dim does not match the text embedder");
  }
}

HttpResponse FusionService::handle(const HttpRequest& req) {
  HttpResponse res;
  if (req.method == "OPTIONS") {
    res.status = 204;
    res.content_type.clear();
  } else if (req.path == "/api/fuse") {
    res = req.method == "POST" ? fuse(req) : error_response(405, "method not allowed");
  } else if (req.path == "/api/tasks") {
    res = req.method == "GET" ? tasks() : error_response(405, "method not allowed");
  } else if (req.path == "/api/history") {
    res = req.method == "GET" ? history_route(req) : error_response(405, "method not allowed");
  } else {
    res = error_response(404, "no route for " + req.path);
  }
  const auto id = req.headers.find("x-request-id");
  res.headers["X-Request-Id"] = id != req.headers.end() ? id->second : next_request_id();
  res.headers["Access-Control-Allow-Origin"] = cfg_.cors_origin;
  res.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
  res.headers["Access-Control-Allow-Headers"] = "Content-Type, X-Request-Id";
  res.headers["Access-Control-Expose-Headers"] = "X-Request-Id";
  return res;
}

HttpResponse FusionService::fuse(const HttpRequest& req) {
  if (req.body.size() > cfg_.max_request_bytes) {
    return error_response(413, "request exceeds " + std::to_string(cfg_.max_request_bytes) +
                                   " bytes");
  }
  if (!checkpoint_) return error_response(503, "no checkpoint loaded");
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto body = nlohmann::json::parse(req.body);
    if (!body.is_object()) throw InvalidInput("request body must be a JSON object");
    const std::string text = get_string(body, "text", true);
    std::string session = get_string(body, "session_id", false);
    if (session.empty()) session = "default";
    const Image vis = decode_field(body, "vis_image");
    const Image ir = decode_field(body, "ir_image");
    if (vis.height() != ir.height() || vis.width() != ir.width()) {
      throw InvalidInput("dimension mismatch: vis_image is " + std::to_string(vis.width()) +
                         "x" + std::to_string(vis.height()) + ", ir_image is " +
                         std::to_string(ir.width()) + "x" + std::to_string(ir.height()));
    }
    const InferenceResult out = infer(*checkpoint_, vis, ir, text, *embedder_, catalog_);
    const Image vis_rgb = vis.colorspace() == ColorSpace::Gray ? gray_to_rgb(vis) : vis;
    const Image ir_gray = ir.colorspace() == ColorSpace::Gray ? ir : luminance(ir);
    const MetricReport m = evaluate_metrics(out.fused, vis_rgb, ir_gray, true);
    const std::string png = base64_encode(encode_png(out.fused));
    record(session, {text, out.profile.name, utc_timestamp()});
    const double latency =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
    return json_response(200, {{"fused_image", png},
                               {"task", out.profile.name},
                               {"metrics", {{"scd", m.scd}, {"sd", m.sd}, {"en", m.en}, {"sf", m.sf}}},
                               {"latency_ms", latency},
                               {"width", out.fused.width()},
                               {"height", out.fused.height()}});
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, std::string("malformed JSON: ") + e.what());
  } catch (const InvalidInput& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

HttpResponse FusionService::tasks() const {
  HttpResponse r;
  r.body = catalog_.canonical_json();
  return r;
}

HttpResponse FusionService::history_route(const HttpRequest& req) const {
  const auto it = req.query.find("session_id");
  nlohmann::json out = nlohmann::json::array();
  if (it != req.query.end()) {
    for (const HistoryEntry& e : history(it->second)) {
      out.push_back({{"prompt", e.prompt}, {"task", e.task}, {"timestamp", e.timestamp}});
    }
  }
  return json_response(200, out);
}

std::vector<HistoryEntry> FusionService::history(const std::string& session_id) const {
  std::lock_guard lock(history_mutex_);
  const auto it = history_.find(session_id);
  if (it == history_.end()) return {};
  return {it->second.begin(), it->second.end()};
}

void FusionService::record(const std::string& session, HistoryEntry entry) {
  std::lock_guard lock(history_mutex_);
  auto& list = history_[session];
  list.push_back(std::move(entry));
  while (list.size() > cfg_.history_limit) list.pop_front();
}

namespace {

HttpRequest from_httplib(const httplib::Request& req) {
  HttpRequest r;
  r.method = req.method;
  r.path = req.path;
  r.body = req.body;
  for (const auto& [k, v] : req.params) r.query.emplace(k, v);
  for (const auto& [k, v] : req.headers) {
    std::string key = k;
    std::transform(key.begin(), key.end(), key.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    r.headers.emplace(std::move(key), v);
  }
  return r;
}

void to_httplib(const HttpResponse& in, httplib::Response& out) {
  out.status = in.status;
  for (const auto& [k, v] : in.headers) out.set_header(k, v);
  if (!in.content_type.empty()) out.set_content(in.body, in.content_type);
}

}  // namespace

void mount(httplib::Server& server, FusionService& service) {
  auto route = [&service](const httplib::Request& req, httplib::Response& res) {
    to_httplib(service.handle(from_httplib(req)), res);
  };
  server.Post("/api/fuse", route);
  server.Get("/api/tasks", route);
  server.Get("/api/history", route);
  server.Options(R"(/api/.*)", route);
  server.set_payload_max_length(service.config().max_request_bytes);
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string msg = res.status == 413 ? "request too large" : httplib::status_message(res.status);
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  });
  server.set_post_routing_handler([&service](const httplib::Request& req, httplib::Response& res) {
    if (!res.has_header("X-Request-Id")) {
      res.set_header("X-Request-Id", req.has_header("X-Request-Id")
                                         ? req.get_header_value("X-Request-Id")
                                         : next_request_id());
    }
    if (!res.has_header("Access-Control-Allow-Origin")) {
      res.set_header("Access-Control-Allow-Origin", service.config().cors_origin);
    }
  });
}

}  // namespace textif
