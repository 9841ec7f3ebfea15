#pragma once
// HTTP front end for a StudyState.
//
//   GET  /api/study/next?annotator=ID   next comparison or {"done":true}
//   POST /api/study/preference          one record or an array of records
//   GET  /api/study/report              de-anonymized report (admin token)
//   GET  /api/study/export              preferences.jsonl
//   GET  /api/health
//   GET  /                              static review bundle, when configured

#include <filesystem>
#include <memory>
#include <string>

#include "kgcot/study_service.hpp"

namespace kgcot {

struct StudyServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080; // 0 picks a free port
    std::string admin_token; // empty disables /api/study/report
    std::filesystem::path static_dir;
};

class StudyServer {
public:
    StudyServer(StudyState& state, StudyServerOptions options);
    ~StudyServer();
    StudyServer(const StudyServer&) = delete;
    StudyServer& operator=(const StudyServer&) = delete;

    // Throws InputError when the address cannot be bound. Returns the port.
    int bind();
    // Blocks until stop().
    void serve();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace kgcot
