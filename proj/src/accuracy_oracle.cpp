#include "layerprune/accuracy_oracle.hpp"

#include "json.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <mutex>
#include <random>
#include <thread>

namespace layerprune {

using json = nlohmann::json;

const char* to_string(OracleSource source) {
  switch (source) {
    case OracleSource::kSurrogate: return "surrogate";
    case OracleSource::kExternal: return "external";
    case OracleSource::kCache: return "cache";
  }
  return "unknown";
}

void SurrogateParams::validate(const SpaceSpec& spec) const {
  if (layer_importance_attn.size() != static_cast<std::size_t>(spec.num_layers) ||
      layer_importance_ffn.size() != static_cast<std::size_t>(spec.num_layers)) {
    throw std::invalid_argument("surrogate needs one importance weight per layer and sublayer");
  }
  auto bad = [](double w) { return !(w > 0.0 && w < 1.0); };
  if (std::any_of(layer_importance_attn.begin(), layer_importance_attn.end(), bad) ||
      std::any_of(layer_importance_ffn.begin(), layer_importance_ffn.end(), bad)) {
    throw std::invalid_argument("surrogate importance weights must lie in (0, 1)");
  }
  if (!(auc_max > 0.0 && auc_max < 1.0)) throw std::invalid_argument("auc_max must lie in (0, 1)");
  if (!(curvature > 0.0)) throw std::invalid_argument("curvature must be positive");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be nonnegative");
}

SurrogateParams default_surrogate_params(const SpaceSpec& spec, double noise_sigma) {
  SurrogateParams p;
  for (int i = 0; i < spec.num_layers; ++i) {
    const double depth = spec.num_layers > 1 ? static_cast<double>(i) / (spec.num_layers - 1) : 0.0;
    p.layer_importance_attn.push_back(0.006 - 0.003 * depth);
    p.layer_importance_ffn.push_back(0.005 - 0.003 * depth);
  }
  p.noise_sigma = noise_sigma;
  return p;
}

double surrogate_auc_mean(const SpaceSpec& spec, const SurrogateParams& params, const SparsityConfig& config) {
  double auc = params.auc_max;
  for (int i = 0; i < spec.num_layers; ++i) {
    const auto dims = retained_dims(spec, config, i);
    const double head_kept = static_cast<double>(dims.heads) / spec.num_heads;
    const double ffn_kept = std::min(1.0, static_cast<double>(dims.ffn) / spec.ffn_dim);
    auc *= 1.0 - params.layer_importance_attn[i] * std::pow(1.0 - head_kept, params.curvature);
    auc *= 1.0 - params.layer_importance_ffn[i] * std::pow(1.0 - ffn_kept, params.curvature);
  }
  return auc;
}

OracleResult surrogate_auc(const SpaceSpec& spec, const SurrogateParams& params, const SparsityConfig& config,
                           Rng& rng) {
  double auc = surrogate_auc_mean(spec, params, config);
  if (params.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    auc += noise(rng);
  }
  return {std::clamp(auc, 1e-6, 1.0 - 1e-6), OracleSource::kSurrogate};
}

SurrogateOracle::SurrogateOracle(SpaceSpec spec, SurrogateParams params, std::uint64_t seed)
    : spec_(spec), params_(std::move(params)), rng_(seed) {
  params_.validate(spec_);
}

OracleResult SurrogateOracle::evaluate(const SparsityConfig& config) {
  return surrogate_auc(spec_, params_, config, rng_);
}

// ---------------------------------------------------------------------------
// External evaluator

std::string make_evaluator_request(const SpaceSpec& spec, std::int64_t id, const SparsityConfig& config,
                                   int budget) {
  json attn = json::array(), ffn = json::array();
  for (int i = 0; i < spec.num_layers; ++i) {
    attn.push_back(config.attention_sparsity(spec, i));
    ffn.push_back(config.ffn_sparsity(spec, i));
  }
  json req = {{"id", id}, {"attention_sparsity", attn}, {"ffn_sparsity", ffn}, {"budget", budget}};
  return req.dump();
}

double parse_evaluator_response(const std::string& line, std::int64_t expected_id) {
  json msg;
  try {
    msg = json::parse(line);
  } catch (const json::parse_error&) {
    throw MalformedResponse("evaluator response is not JSON", line);
  }
  if (!msg.is_object() || !msg.contains("id") || !msg.contains("auc")) {
    throw MalformedResponse("evaluator response lacks id or auc", line);
  }
  if (!msg["id"].is_number_integer()) throw MalformedResponse("evaluator response id is not an integer", line);
  if (!msg["auc"].is_number()) throw MalformedResponse("evaluator response auc is not numeric", line);
  const auto id = msg["id"].get<std::int64_t>();
  if (id != expected_id) {
    throw ProtocolMismatch("evaluator answered id " + std::to_string(id) + ", expected " +
                           std::to_string(expected_id));
  }
  const double auc = msg["auc"].get<double>();
  if (!(auc > 0.0 && auc < 1.0)) throw MalformedResponse("evaluator auc outside (0, 1)", line);
  return auc;
}

ExternalOracle::ExternalOracle(SpaceSpec spec, const std::string& command, ExternalOracleOptions options)
    : spec_(spec), options_(options), next_id_(options.first_request_id) {
  if (command.empty()) throw std::invalid_argument("empty evaluator command");
  ::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2], out_pipe[2];
  if (::pipe(in_pipe) != 0) throw EvaluatorError(std::string("pipe: ") + std::strerror(errno));
  if (::pipe(out_pipe) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw EvaluatorError(std::string("pipe: ") + std::strerror(errno));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw EvaluatorError(std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    // Own process group, so shutdown also reaches anything the shell spawned.
    ::setpgid(0, 0);
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
}

ExternalOracle::~ExternalOracle() { shutdown(); }

void ExternalOracle::shutdown() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    int status = 0;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) == pid_) {
        ::kill(-pid_, SIGKILL);
        pid_ = -1;
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(-pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
}

std::string ExternalOracle::read_line() {
  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  while (true) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    const auto remaining =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (remaining.count() <= 0) {
      shutdown();
      throw EvaluatorTimeout("evaluator did not answer within " + std::to_string(options_.timeout.count()) +
                             " ms");
    }
    pollfd pfd{from_child_, POLLIN, 0};
    const int wait_ms = static_cast<int>(std::min<long long>(remaining.count(), 1 << 30));
    const int rc = ::poll(&pfd, 1, wait_ms);
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw EvaluatorError(std::string("poll: ") + std::strerror(errno));
    }
    if (rc == 0) continue;
    char chunk[4096];
    const ssize_t n = ::read(from_child_, chunk, sizeof(chunk));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw EvaluatorError(std::string("read: ") + std::strerror(errno));
    }
    if (n == 0) {
      shutdown();
      throw EvaluatorExited("evaluator exited before answering" +
                            (buffer_.empty() ? std::string() : " (partial output: " + buffer_ + ")"));
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

OracleResult ExternalOracle::evaluate(const SparsityConfig& config) {
  return external_auc(config, options_.budget);
}

OracleResult ExternalOracle::external_auc(const SparsityConfig& config, int budget) {
  if (pid_ < 0) throw EvaluatorExited("evaluator is not running");
  config.validate(spec_);
  const std::int64_t id = next_id_++;
  const std::string request = make_evaluator_request(spec_, id, config, budget) + "\n";
  std::size_t off = 0;
  while (off < request.size()) {
    const ssize_t n = ::write(to_child_, request.data() + off, request.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      shutdown();
      throw EvaluatorExited(std::string("cannot write to evaluator: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
  const std::string line = read_line();
  return {parse_evaluator_response(line, id), OracleSource::kExternal};
}

// ---------------------------------------------------------------------------
// Cache

CachedOracle::CachedOracle(std::unique_ptr<AccuracyOracle> inner) : inner_(std::move(inner)) {
  if (!inner_) throw std::invalid_argument("cached oracle needs an inner oracle");
}

OracleResult CachedOracle::evaluate(const SparsityConfig& config) {
  {
    std::shared_lock lock(mutex_);
    if (auto it = table_.find(config); it != table_.end()) {
      const double auc = it->second;
      lock.unlock();
      std::unique_lock count(mutex_);
      ++hits_;
      return {auc, OracleSource::kCache};
    }
  }
  const OracleResult fresh = inner_->evaluate(config);
  std::unique_lock lock(mutex_);
  ++misses_;
  table_.emplace(config, fresh.auc);
  return fresh;
}

std::int64_t CachedOracle::hits() const {
  std::shared_lock lock(mutex_);
  return hits_;
}

std::int64_t CachedOracle::misses() const {
  std::shared_lock lock(mutex_);
  return misses_;
}

std::size_t CachedOracle::size() const {
  std::shared_lock lock(mutex_);
  return table_.size();
}

}  // namespace layerprune
