// Scripted protocol backend for tests: answers request lines on stdin with response lines on stdout.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "regprompt/protocol.hpp"
#include "regprompt/segmenter.hpp"

using namespace regprompt;

int main(int argc, char** argv) {
    CLI::App app{"Mock segmenter backend speaking the NDJSON slice protocol"};
    app.name("mock_segmenter");
    std::string mode = "toy";
    double tau = ToySegmenter::kDefaultTau;
    std::vector<std::string> fail_ids;
    int sleep_ms = 0;
    app.add_option("--mode", mode, "Reply behaviour")
        ->check(CLI::IsMember({"toy", "zeros", "wrong-dims", "garbage", "bad-id", "silent", "exit"}));
    app.add_option("--tau", tau, "Region-growing tolerance in toy mode");
    app.add_option("--fail-ids", fail_ids, "Answer with an error object when the request id contains any of these")
        ->delimiter(',');
    app.add_option("--sleep-ms", sleep_ms, "Delay before each reply");
    CLI11_PARSE(app, argc, argv);

    std::ios::sync_with_stdio(false);
    ToySegmenter toy(tau);
    for (std::string line; std::getline(std::cin, line);) {
        if (mode == "exit") return 0;
        if (mode == "silent") continue;
        if (sleep_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(sleep_ms));
        std::string reply;
        try {
            const SegmenterRequest req = protocol::decode_request(line);
            bool fail = false;
            for (const auto& f : fail_ids) fail = fail || req.request_id.find(f) != std::string::npos;
            if (fail) {
                reply = protocol::encode_error(req.request_id, "scripted failure");
            } else if (mode == "garbage") {
                reply = "this is not json";
            } else {
                SegmenterResponse resp;
                resp.request_id = mode == "bad-id" ? req.request_id + "-x" : req.request_id;
                if (mode == "toy") {
                    validate_request(req);
                    resp = toy.segment(req);
                } else {
                    const int w = mode == "wrong-dims" ? req.slice.width + 1 : req.slice.width;
                    resp.mask = {w, req.slice.height,
                                 std::vector<std::uint8_t>(static_cast<std::size_t>(w) *
                                                               static_cast<std::size_t>(req.slice.height),
                                                           0)};
                }
                reply = protocol::encode_response(resp);
            }
        } catch (const Error& e) {
            const auto j = nlohmann::json::parse(line, nullptr, false);
            std::string id;
            if (!j.is_discarded() && j.is_object() && j.contains("request_id") && j["request_id"].is_string())
                id = j["request_id"].get<std::string>();
            reply = protocol::encode_error(id, e.what());
        }
        std::cout << reply << "\n" << std::flush;
    }
    return 0;
}
