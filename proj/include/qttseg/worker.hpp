/*
 * Copyright 2026 The qttseg Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Trainer wire protocol: newline-delimited JSON over the worker's stdin and
// stdout, one outstanding request at a time.
//
//   {"cmd":"init","dataset_path":...,"subsample_n":100,"seed":...}
//   {"cmd":"step","config":{...},"epoch":k,"run_id":...}
//   {"cmd":"zero_shot"}
//   {"cmd":"shutdown"}
//
// Replies are {"status":"ok",...} or {"status":"error","message":...}.

#ifndef QTTSEG_WORKER_HPP
#define QTTSEG_WORKER_HPP

#include <csignal>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "qttseg/search_space.hpp"

namespace qttseg {

class WorkerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Transport: sends one request line, returns one response line.
class WorkerChannel {
 public:
  virtual ~WorkerChannel() = default;
  virtual std::string exchange(const std::string& request_line) = 0;
};

struct WorkerResponse {
  bool ok = false;
  double val_iou = 0.0;
  double wall_clock_s = 0.0;
  std::string message;
};

namespace protocol {

inline nlohmann::json init_request(const std::string& dataset_path, int subsample_n, std::uint64_t seed) {
  return {{"cmd", "init"}, {"dataset_path", dataset_path}, {"subsample_n", subsample_n}, {"seed", seed}};
}

inline nlohmann::json step_request(const Configuration& c, int epoch, const std::string& run_id) {
  return {{"cmd", "step"}, {"config", to_json(c)}, {"epoch", epoch}, {"run_id", run_id}};
}

inline nlohmann::json ok_response() { return {{"status", "ok"}}; }

inline nlohmann::json ok_response(double val_iou, double wall_clock_s) {
  return {{"status", "ok"}, {"val_iou", val_iou}, {"wall_clock_s", wall_clock_s}};
}

inline nlohmann::json error_response(const std::string& message) {
  return {{"status", "error"}, {"message", message}};
}

/// Parses a reply line. Metric replies must carry val_iou in [0,1] and a
/// non-negative wall_clock_s.
inline WorkerResponse parse_response(const std::string& line, bool expect_metrics) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw WorkerError(std::string("malformed worker reply: ") + e.what());
  }
  if (!j.is_object() || !j.contains("status")) throw WorkerError("worker reply without status");
  WorkerResponse r;
  const auto status = j.at("status").get<std::string>();
  if (status == "error") {
    r.ok = false;
    r.message = j.value("message", std::string("unspecified worker error"));
    if (j.contains("wall_clock_s") && j["wall_clock_s"].is_number()) r.wall_clock_s = j["wall_clock_s"].get<double>();
    return r;
  }
  if (status != "ok") throw WorkerError("unknown worker status '" + status + "'");
  r.ok = true;
  if (expect_metrics) {
    if (!j.contains("val_iou") || !j.contains("wall_clock_s")) throw WorkerError("worker reply missing metrics");
    r.val_iou = j.at("val_iou").get<double>();
    r.wall_clock_s = j.at("wall_clock_s").get<double>();
    if (!(r.val_iou >= 0.0 && r.val_iou <= 1.0)) throw WorkerError("worker val_iou outside [0,1]");
    if (!(r.wall_clock_s >= 0.0)) throw WorkerError("worker wall_clock_s negative");
  }
  return r;
}

}  // namespace protocol

/// Typed calls over a channel.
class WorkerClient {
 public:
  explicit WorkerClient(WorkerChannel& channel) : channel_(channel) {}

  WorkerResponse init(const std::string& dataset_path, int subsample_n, std::uint64_t seed) {
    return call(protocol::init_request(dataset_path, subsample_n, seed), false);
  }
  WorkerResponse step(const Configuration& c, int epoch, const std::string& run_id) {
    return call(protocol::step_request(c, epoch, run_id), true);
  }
  WorkerResponse zero_shot() { return call({{"cmd", "zero_shot"}}, true); }
  WorkerResponse shutdown() { return call({{"cmd", "shutdown"}}, false); }

 private:
  WorkerResponse call(const nlohmann::json& request, bool expect_metrics) {
    return protocol::parse_response(channel_.exchange(request.dump()), expect_metrics);
  }

  WorkerChannel& channel_;
};

/// Runs `/bin/sh -c command` and talks to it over pipes.
class ProcessChannel : public WorkerChannel {
 public:
  explicit ProcessChannel(const std::string& command) {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) throw WorkerError("pipe() failed");
    pid_ = fork();
    if (pid_ < 0) throw WorkerError("fork() failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    out_ = fdopen(to_child[1], "w");
    in_ = fdopen(from_child[0], "r");
    if (!out_ || !in_) throw WorkerError("fdopen() failed");
  }

  ProcessChannel(const ProcessChannel&) = delete;
  ProcessChannel& operator=(const ProcessChannel&) = delete;

  ~ProcessChannel() override {
    if (out_) std::fclose(out_);
    if (in_) std::fclose(in_);
    if (pid_ > 0) {
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == 0) {
        kill(pid_, SIGTERM);
        waitpid(pid_, &status, 0);
      }
    }
  }

  std::string exchange(const std::string& request_line) override {
    // A dead child turns writes into SIGPIPE; surface it as an error instead.
    std::signal(SIGPIPE, SIG_IGN);
    if (std::fputs(request_line.c_str(), out_) < 0 || std::fputc('\n', out_) == EOF || std::fflush(out_) != 0) {
      throw WorkerError("worker stdin closed");
    }
    std::string line;
    int ch;
    while ((ch = std::fgetc(in_)) != EOF && ch != '\n') line.push_back(static_cast<char>(ch));
    if (ch == EOF && line.empty()) throw WorkerError("worker exited without replying");
    return line;
  }

 private:
  pid_t pid_ = -1;
  std::FILE* out_ = nullptr;
  std::FILE* in_ = nullptr;
};

}  // namespace qttseg

#endif  // QTTSEG_WORKER_HPP
