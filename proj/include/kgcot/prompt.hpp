#pragma once
// Versioned prompt templates stored as text assets.
//
// File layout:
//   # version: <string>
//   [system]
//   ...
//   [user]
//   ...
// Placeholders use {{name}}. Lines starting with '#' before the first
// section are header comments.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kgcot/llm_gateway.hpp"

namespace kgcot {

using PromptBindings = std::map<std::string, std::string>;

class PromptTemplate {
public:
    static PromptTemplate parse(std::string name, const std::string& text);
    static PromptTemplate load(const std::filesystem::path& dir, const std::string& name);

    const std::string& name() const { return name_; }
    const std::string& version() const { return version_; }
    // "<name>@<version>", recorded in provenance.
    std::string label() const { return name_ + "@" + version_; }
    const std::set<std::string>& placeholders() const { return placeholders_; }

    // Every placeholder must be bound and every binding must be used.
    std::vector<ChatMessage> render(const PromptBindings& bindings) const;

private:
    std::string name_;
    std::string version_;
    std::string system_;
    std::string user_;
    std::set<std::string> placeholders_;
};

// The four pipeline templates, loaded from one directory.
struct PromptSet {
    PromptTemplate entity_select;
    PromptTemplate node_select;
    PromptTemplate path_select;
    PromptTemplate cot_gen;

    static PromptSet load(const std::filesystem::path& dir);
};

} // namespace kgcot
