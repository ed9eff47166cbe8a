#pragma once

// HTTP + JSON service for interactive correction sessions:
//   GET  /api/checkpoints
//   GET  /api/scenes?seed=S&count=N[&checkpoint=ID]
//   POST /api/sessions                 {checkpoint_id, scene_seed, condition?, seed?}
//   POST /api/sessions/{id}/run        {steps, weights, negative?, checkpoints[]}
//   POST /api/sessions/{id}/advise     {k}
//   POST /api/sessions/{id}/workflow   {k, steps?, weights?}
// Errors are {code, message} with a 4xx status.

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "aligndiff/config.hpp"
#include "aligndiff/guidance.hpp"
#include "aligndiff/io.hpp"

namespace httplib {
class Server;
}

namespace aligndiff {

struct RegisteredCheckpoint {
  std::string id;
  ExperimentConfig config;
  TrainedModel model;
};

/// Status-carrying error raised by request handlers.
struct ApiError : std::runtime_error {
  int status;
  std::string code;
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
};

class Service {
 public:
  Service();
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void add_checkpoint(RegisteredCheckpoint checkpoint);
  /// Registers every runs_dir/<id> holding config.json and checkpoint.bin;
  /// returns the number registered.
  int add_runs_dir(const std::string& runs_dir);
  std::size_t checkpoint_count() const;

  /// Route a request without a socket. Returns (status, JSON body).
  std::pair<int, nlohmann::json> handle(const std::string& method, const std::string& path,
                                        const std::string& body,
                                        const std::map<std::string, std::string>& query = {});

  /// Binds and serves until stop(). Port 0 picks a free port (see port()).
  bool bind(const std::string& host, int port);
  void listen_after_bind();
  int port() const { return port_; }
  void stop();

 private:
  struct Session {
    std::string id;
    std::string checkpoint_id;
    std::uint64_t scene_seed = 0;
    std::uint64_t seed = 0;
    Example example;
    std::mutex mutex;
  };

  nlohmann::json list_checkpoints() const;
  nlohmann::json list_scenes(const std::map<std::string, std::string>& query) const;
  nlohmann::json create_session(const nlohmann::json& body);
  nlohmann::json run(Session& s, const nlohmann::json& body);
  nlohmann::json advise(Session& s, const nlohmann::json& body);
  nlohmann::json workflow(Session& s, const nlohmann::json& body);

  const RegisteredCheckpoint& checkpoint(const std::string& id) const;
  std::shared_ptr<Session> session(const std::string& id);

  std::map<std::string, std::shared_ptr<const RegisteredCheckpoint>> checkpoints_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  mutable std::mutex registry_mutex_;
  std::uint64_t next_session_ = 1;
  std::unique_ptr<httplib::Server> server_;
  int port_ = 0;
};

nlohmann::json scene_to_json(const ToyScene& scene);
nlohmann::json rle_to_json(const RunLengthMask& rle);
RunLengthMask rle_from_json(const nlohmann::json& j);
/// Base64 PNG of a channel-major sample.
std::string image_b64(const SampleD& image, int grid);

}  // namespace aligndiff
