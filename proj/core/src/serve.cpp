#include "msr/serve.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "msr/datagen.hpp"

namespace msr {

using json = nlohmann::json;

double serve_predict(MVParams& model, const SampleInput& in, std::int64_t* micros_out) {
  const auto t0 = std::chrono::steady_clock::now();
  Tape tape;
  const double y = mv_forward(tape, model, in).y_hat.scalar();
  const auto t1 = std::chrono::steady_clock::now();
  if (micros_out)
    *micros_out = std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count();
  return y;
}

namespace {

// error details can embed raw request bytes; replace invalid UTF-8 instead of
// letting the serializer throw
std::string safe_dump(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string handle_line(MVParams& model, const std::string& line, ServeStats& stats) {
  json req;
  try {
    req = json::parse(line);
  } catch (const json::exception& e) {
    ++stats.errors;
    return safe_dump(json{{"error", "parse"}, {"detail", e.what()}});
  }
  try {
    DatasetRow row = row_from_json(req, /*require_label=*/false);
    std::int64_t micros = 0;
    const double msr = serve_predict(model, row.features, &micros);
    ++stats.served;
    return safe_dump(json{{"pair_id", row.pair_id}, {"msr", msr}, {"micros", micros}});
  } catch (const json::exception& e) {
    ++stats.errors;
    return safe_dump(json{{"error", "schema"}, {"detail", e.what()}});
  } catch (const std::exception& e) {
    ++stats.errors;
    return safe_dump(json{{"error", "request"}, {"detail", e.what()}});
  }
}

}  // namespace

ServeStats serve_loop(MVParams& model, std::istream& in, std::ostream& out) {
  ServeStats stats;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out << handle_line(model, line, stats) << '\n';
    out.flush();
  }
  return stats;
}

void serve_tcp(MVParams& model, int port, std::uint64_t max_connections) {
  const int server = ::socket(AF_INET, SOCK_STREAM, 0);
  if (server < 0) throw Error("socket() failed");
  const int one = 1;
  ::setsockopt(server, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(server, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(server);
    throw Error("cannot bind port " + std::to_string(port));
  }
  if (::listen(server, 4) != 0) {
    ::close(server);
    throw Error("listen() failed");
  }

  std::uint64_t handled = 0;
  while (max_connections == 0 || handled < max_connections) {
    const int client = ::accept(server, nullptr, nullptr);
    if (client < 0) break;
    std::string buffer;
    char chunk[4096];
    ServeStats stats;
    for (;;) {
      const ssize_t n = ::read(client, chunk, sizeof(chunk));
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t pos;
      while ((pos = buffer.find('\n')) != std::string::npos) {
        std::string line = buffer.substr(0, pos);
        buffer.erase(0, pos + 1);
        if (line.empty()) continue;
        const std::string reply = handle_line(model, line, stats) + "\n";
        std::size_t off = 0;
        while (off < reply.size()) {
          const ssize_t w = ::write(client, reply.data() + off, reply.size() - off);
          if (w <= 0) break;
          off += static_cast<std::size_t>(w);
        }
      }
    }
    ::close(client);
    ++handled;
  }
  ::close(server);
}

}  // namespace msr
