#include "kgcot/prompt.hpp"

#include "kgcot/common.hpp"

#include <sstream>

namespace kgcot {

namespace {

std::set<std::string> scan_placeholders(const std::string& text, const std::string& name) {
    std::set<std::string> found;
    std::size_t pos = 0;
    while ((pos = text.find("{{", pos)) != std::string::npos) {
        const auto end = text.find("}}", pos + 2);
        if (end == std::string::npos) throw InputError("template " + name + ": unterminated placeholder");
        const auto key = trim(std::string_view(text).substr(pos + 2, end - pos - 2));
        if (key.empty()) throw InputError("template " + name + ": empty placeholder");
        found.insert(key);
        pos = end + 2;
    }
    return found;
}

std::string substitute_line(const std::string& text, const PromptBindings& bindings) {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        const auto open = text.find("{{", pos);
        if (open == std::string::npos) break;
        const auto close = text.find("}}", open + 2);
        out.append(text, pos, open - pos);
        out += bindings.at(trim(std::string_view(text).substr(open + 2, close - open - 2)));
        pos = close + 2;
    }
    out.append(text, pos);
    return out;
}

// A line holding nothing but a placeholder bound to "" is removed entirely.
std::string substitute(const std::string& text, const PromptBindings& bindings) {
    std::string out;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        const auto bare = trim(line);
        const bool sole = bare.starts_with("{{") && bare.ends_with("}}") && bare.find("{{", 2) == std::string::npos;
        if (!(sole && bindings.at(trim(std::string_view(bare).substr(2, bare.size() - 4))).empty())) {
            out += substitute_line(line, bindings);
            if (end < text.size()) out += '\n';
        }
        start = end + 1;
    }
    while (!out.empty() && out.back() == '\n') out.pop_back();
    return out;
}

std::string strip_trailing_newlines(std::string text) {
    while (!text.empty() && (text.back() == '\n' || text.back() == ' ')) text.pop_back();
    return text;
}

} // namespace

PromptTemplate PromptTemplate::parse(std::string name, const std::string& text) {
    PromptTemplate t;
    t.name_ = std::move(name);
    std::istringstream in(text);
    std::string line;
    std::string* section = nullptr;
    std::string system, user;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!section && line.starts_with("#")) {
            const auto body = trim(std::string_view(line).substr(1));
            if (body.starts_with("version:")) t.version_ = trim(std::string_view(body).substr(8));
            continue;
        }
        if (line == "[system]") {
            section = &system;
            continue;
        }
        if (line == "[user]") {
            section = &user;
            continue;
        }
        if (!section) {
            if (trim(line).empty()) continue;
            throw InputError("template " + t.name_ + ": text before the first section");
        }
        *section += line;
        *section += '\n';
    }
    if (t.version_.empty()) throw InputError("template " + t.name_ + ": missing '# version:' header");
    t.system_ = strip_trailing_newlines(system);
    t.user_ = strip_trailing_newlines(user);
    if (t.user_.empty()) throw InputError("template " + t.name_ + ": empty [user] section");
    t.placeholders_ = scan_placeholders(t.system_, t.name_);
    t.placeholders_.merge(scan_placeholders(t.user_, t.name_));
    return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& dir, const std::string& name) {
    return parse(name, read_file(dir / (name + ".txt")));
}

std::vector<ChatMessage> PromptTemplate::render(const PromptBindings& bindings) const {
    for (const auto& key : placeholders_) {
        if (!bindings.contains(key)) throw InputError("template " + name_ + ": unbound placeholder {{" + key + "}}");
    }
    for (const auto& [key, value] : bindings) {
        if (!placeholders_.contains(key))
            throw InputError("template " + name_ + ": binding '" + key + "' has no placeholder");
    }
    std::vector<ChatMessage> messages;
    if (!system_.empty()) messages.push_back({Role::system, substitute(system_, bindings)});
    messages.push_back({Role::user, substitute(user_, bindings)});
    return messages;
}

PromptSet PromptSet::load(const std::filesystem::path& dir) {
    return {PromptTemplate::load(dir, "entity_select"), PromptTemplate::load(dir, "node_select"),
            PromptTemplate::load(dir, "path_select"), PromptTemplate::load(dir, "cot_gen")};
}

} // namespace kgcot
