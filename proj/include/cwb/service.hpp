#pragma once

#include "cwb/experiments.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

namespace cwb {

struct ServiceOptions {
  std::filesystem::path results_dir = "results";
  std::filesystem::path ui_dir;  // static files served at /; empty disables
  int workers = 1;               // job threads
  size_t max_queued = 32;        // further submissions answer 503
  int max_sync_samples = 1024;   // cap for synchronous /api/patch requests
};

enum class JobState { queued, running, done, failed };
const char* job_state_name(JobState s);

struct Job {
  std::string id;
  std::string kind;  // sweep | circuit | experiment
  nlohmann::json spec;
  JobState state = JobState::queued;
  double progress = 0.0;
  std::string result_ref;  // set once done
  std::string error;       // set once failed
  nlohmann::json to_json() const;
};

struct ApiRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

// JSON API over a shared read-only engine. The transport-free handle() is what the
// HTTP server calls; tests can drive it directly.
class Service {
 public:
  // `engine` may be null; model endpoints then answer 409.
  Service(std::shared_ptr<const Engine> engine, ServiceOptions opts = {});
  ~Service();  // finishes running jobs, drops queued ones
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ApiResponse handle(const ApiRequest& req);

  // Serves HTTP until stop(). Port 0 binds a free port; `on_bound` receives the port.
  // Returns false when the address cannot be bound.
  bool listen(const std::string& host, int port, const std::function<void(int)>& on_bound = {});
  void stop();

  std::optional<Job> job(const std::string& id) const;
  // Blocks until the job is done or failed; throws NotFoundError for an unknown id.
  Job wait(const std::string& id) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cwb
