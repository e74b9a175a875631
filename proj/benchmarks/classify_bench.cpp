#include <string>

#include <benchmark/benchmark.h>

#include <topicguard/evalharness.hpp>

namespace {

void BM_ClassifyResponse(benchmark::State& state) {
  std::string reply;
  while (reply.size() < static_cast<std::size_t>(state.range(0))) {
    reply += "Your reservation is confirmed and the receipt was sent to your inbox. ";
  }
  const auto& phrases = topicguard::default_refusal_phrases();
  for (auto _ : state) benchmark::DoNotOptimize(topicguard::classify_response(reply, phrases));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(reply.size()));
}
BENCHMARK(BM_ClassifyResponse)->Arg(64)->Arg(1024)->Arg(16384);

}  // namespace
BENCHMARK_MAIN();
