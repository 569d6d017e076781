#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "msr/mv_model.hpp"

namespace msr {

struct ServeStats {
  std::uint64_t served = 0;
  std::uint64_t errors = 0;
};

/// Newline-delimited JSON loop: each request line is one dataset-schema row
/// without "label"/"latent"; each response line is
/// {"pair_id", "msr", "micros"}. A malformed line yields an error object on
/// that line and the loop continues. Runs until EOF.
ServeStats serve_loop(MVParams& model, std::istream& in, std::ostream& out);

/// One prediction; micros_out, when set, receives the forward wall time.
double serve_predict(MVParams& model, const SampleInput& in,
                     std::int64_t* micros_out = nullptr);

/// Thin TCP wrapper over the same line protocol. Accepts connections
/// sequentially; each connection runs serve_loop until the peer closes.
/// max_connections = 0 means serve forever.
void serve_tcp(MVParams& model, int port, std::uint64_t max_connections = 0);

}  // namespace msr
