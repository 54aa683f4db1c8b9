// Command-line driver for the membership inference pipeline.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mialab/cli/config.hpp"
#include "mialab/cli/pipeline.hpp"
#include "mialab/common/error.hpp"

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, prerequisite_error = 3, numeric_error = 4, io_error = 5 };

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

int report_errors(const std::vector<std::string>& errors) {
    std::cerr << errors.size() << " configuration problem(s):\n";
    for (const auto& e : errors) std::cerr << "  " << e << "\n";
    return config_error;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace mialab;
    CLI::App app{"Membership inference against fine-tuned recommendation language models"};
    std::string config_path, stage = "all", out, attacks, preset;
    std::uint64_t seed = 0;
    bool sweep = false, validate_only = false, resume = false, print_config = false;
    app.add_option("--config", config_path, "experiment config (JSON); defaults apply when omitted")
        ->check(CLI::ExistingFile);
    app.add_option("--stage", stage, "gen-data, train-target, distill, extract, attack, evaluate or all");
    auto* seed_opt = app.add_option("--seed", seed, "override the top-level seed");
    app.add_option("--out", out, "override output_dir");
    app.add_option("--attacks", attacks, "comma-separated attacks (ours, ppl, min-k, min-k-pp, zlib, shadow)");
    app.add_option("--preset", preset, "threat-model preset")
        ->check(CLI::IsMember({"lf-like", "ml-like", "bc-like", "dl-like"}));
    app.add_flag("--sweep-alpha", sweep, "run alpha = 0.0..1.0 in steps of 0.1 and write sweep.csv");
    app.add_flag("--validate-only", validate_only, "check the config and exit");
    app.add_flag("--resume", resume, "reuse stages whose recorded inputs and outputs still match");
    app.add_flag("--print-config", print_config, "print the effective config as JSON and exit");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        cli::ExperimentConfig config;
        if (!config_path.empty()) {
            const auto errors = cli::validate_config(config_path);
            if (!errors.empty()) return report_errors(errors);
            config = cli::load_config(config_path);
        }
        if (!preset.empty()) cli::apply_preset(config, preset);
        if (*seed_opt) config.seed = seed;
        if (!out.empty()) config.output_dir = out;
        if (!attacks.empty()) config.attacks.enabled = split_list(attacks);
        if (const auto errors = cli::validate(config); !errors.empty()) return report_errors(errors);

        if (print_config) {
            std::cout << cli::to_json(config).dump(2) << "\n";
            return ok;
        }
        if (validate_only) {
            std::cerr << "config ok\n";
            return ok;
        }

        cli::RunOptions options;
        options.log = &std::cerr;
        options.reuse = resume;
        if (sweep) {
            cli::run_alpha_sweep(config, options);
        } else if (stage == "all") {
            cli::run_full(config, options);
        } else {
            cli::run_stage(config, cli::stage_from_string(stage), options);
        }
        return ok;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return config_error;
    } catch (const PrerequisiteError& e) {
        std::cerr << "prerequisite missing: " << e.what() << "\n";
        return prerequisite_error;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return numeric_error;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return io_error;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return io_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return failure;
    }
}
