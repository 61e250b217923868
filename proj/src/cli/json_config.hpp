#pragma once

#include <istream>
#include <iterator>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

namespace amal::cli {

/// Reads CLI11 config items from a JSON object. Keys are long flag names
/// (dashes or underscores). A nested object named after a subcommand
/// targets that subcommand; other top-level keys target the subcommand
/// being run. Values given on the command line take precedence.
class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(const CLI::App* root) : root_(root) {}

    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConfigError("config must be a JSON object");

        std::vector<std::string> active;
        for (const auto* sub : root_->get_subcommands()) active.push_back(sub->get_name());

        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            if (value.is_object()) {
                for (const auto& [k, v] : value.items()) items.push_back(item({key}, k, v));
            } else {
                items.push_back(item(active, key, value));
            }
        }
        return items;
    }

private:
    static CLI::ConfigItem item(std::vector<std::string> parents, std::string name, const nlohmann::json& v) {
        for (auto& c : name)
            if (c == '_') c = '-';
        CLI::ConfigItem it;
        it.parents = std::move(parents);
        it.name = std::move(name);
        if (v.is_array()) {
            for (const auto& e : v) it.inputs.push_back(scalar(e));
        } else {
            it.inputs.push_back(scalar(v));
        }
        return it;
    }

    static std::string scalar(const nlohmann::json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    }

    const CLI::App* root_;
};

}  // namespace amal::cli
