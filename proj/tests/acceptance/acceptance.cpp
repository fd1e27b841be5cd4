// Acceptance suite: one PASS/FAIL line per criterion. Artifacts land under --out.

#include "covft/experiments.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace covft;
using json = nlohmann::json;

namespace {

struct Outcome {
    int id = 0;
    bool passed = false;
    std::string summary;
    double seconds = 0.0;
};

double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

ExperimentConfig base_config() { return config_from_key_values({}); }

/// Budget for the ablation matrices: they check machinery, not accuracy.
ExperimentConfig ablation_config(MatrixAxis axis) {
    ExperimentConfig c = base_config();
    set_config_value(c, "train.strategy", "covft");
    set_config_value(c, "train.pretrain_steps", "100");
    set_config_value(c, "train.instruct_steps", "200");
    set_config_value(c, "data.n_eval", "300");
    set_config_value(c, "analysis.probe_samples", "100");
    set_config_value(c, "bench.seeds", "1");
    set_config_value(c, "bench.matrix", std::string(axis_name(axis)));
    return c;
}

class Suite {
public:
    Suite(fs::path out, std::set<int> only) : out_(std::move(out)), only_(std::move(only)) {}

    bool wanted(int id) const { return only_.empty() || only_.count(id); }

    void report(Outcome o) {
        std::cout << "criterion " << std::setw(2) << o.id << ": " << (o.passed ? "PASS" : "FAIL") << "  "
                  << o.summary << "  [" << std::fixed << std::setprecision(1) << o.seconds << " s]"
                  << std::defaultfloat << std::setprecision(6) << std::endl;
        outcomes_.push_back(std::move(o));
    }

    // ---- 1-4: verify --------------------------------------------------------------

    void verify() {
        if (!wanted(1) && !wanted(2) && !wanted(3) && !wanted(4)) return;
        const VerifyResult r = run_verify(base_config(), out_ / "verify");
        const std::map<std::string, std::pair<int, double>> limits{{"end_to_end_gradient", {1, 60.0}},
                                                                   {"gradient_modulation", {2, 30.0}},
                                                                   {"init_equivalence", {3, 10.0}},
                                                                   {"mask_soundness", {4, 120.0}}};
        for (const auto& c : r.checks) {
            const auto it = limits.find(c.name);
            if (it == limits.end() || !wanted(it->second.first)) continue;
            const bool fast = c.seconds < it->second.second;
            Outcome o{it->second.first, c.passed && fast, {}, c.seconds};
            o.summary = c.name + " worst " + fmt(c.value) + " (tol " + fmt(c.tolerance) + "), runtime limit " +
                        fmt(it->second.second) + " s" + (fast ? "" : " EXCEEDED") + "; " + c.detail;
            report(std::move(o));
        }
    }

    // ---- 5-6: conflict ------------------------------------------------------------

    void conflict() {
        if (!wanted(5) && !wanted(6)) return;
        const auto t0 = std::chrono::steady_clock::now();
        const ConflictResult r = run_conflict(base_config(), out_ / "conflict");
        const double secs = since(t0);
        if (wanted(5)) {
            Outcome o{5, true, {}, secs};
            std::ostringstream os;
            for (const auto& s : r.seeds) {
                const bool ok = s.spearman > 0.9 && s.deep_mean > s.shallow_mean;
                o.passed = o.passed && ok;
                os << "seed " << s.seed << ": spearman " << fmt(s.spearman) << ", deep " << fmt(s.deep_mean)
                   << " vs shallow " << fmt(s.shallow_mean) << (ok ? "" : " (fails)") << "; ";
            }
            o.passed = o.passed && r.seeds.size() == 3 && secs < 300.0;
            o.summary = os.str() + "runtime limit 300 s";
            report(std::move(o));
        }
        if (wanted(6)) {
            Outcome o{6, true, {}, secs};
            std::ostringstream os;
            std::size_t lower_std = 0;
            for (const auto& s : r.seeds) {
                const bool ok = s.covft.mean > s.full_ft.mean;
                o.passed = o.passed && ok;
                lower_std += s.covft.stddev < s.full_ft.stddev;
                os << "seed " << s.seed << ": mean covft " << fmt(s.covft.mean) << " vs full_ft "
                   << fmt(s.full_ft.mean) << ", std " << fmt(s.covft.stddev) << " vs " << fmt(s.full_ft.stddev)
                   << (ok ? "" : " (mean fails)") << "; ";
            }
            o.passed = o.passed && lower_std >= 2 && secs < 300.0;
            os << "covft std lower on " << lower_std << "/3 seeds";
            o.summary = os.str();
            report(std::move(o));
        }
    }

    // ---- 9 (+ runs reused by 7-8): strategy bench at the default budget -----------------

    void strategy_bench() {
        if (!wanted(7) && !wanted(8) && !wanted(9)) return;
        ExperimentConfig c = base_config();
        set_config_value(c, "bench.values", "freeze,full_ft,covft");
        const auto t0 = std::chrono::steady_clock::now();
        const BenchResult r = run_bench(c, out_ / "bench_strategy", 1);
        bench_seconds_ = since(t0);
        std::map<std::string, std::map<std::uint64_t, double>> macro;
        for (const auto& cell : r.cells) {
            if (cell.ok && cell.eval) macro[cell.variant][cell.seed] = cell.eval->macro_mean();
            if (cell.variant == "covft" && cell.ok) covft_runs_.push_back(cell.dir);
        }
        if (!wanted(9)) return;
        Outcome o{9, r.all_ok(), {}, bench_seconds_};
        std::ostringstream os;
        double cov_sum = 0.0, full_sum = 0.0;
        for (std::uint64_t seed : c.bench.seeds) {
            const double cv = macro["covft"][seed], fr = macro["freeze"][seed], ff = macro["full_ft"][seed];
            const bool ok = cv >= fr;
            o.passed = o.passed && ok;
            cov_sum += cv;
            full_sum += ff;
            os << "seed " << seed << ": covft " << fmt(cv) << " freeze " << fmt(fr) << " full_ft " << fmt(ff)
               << (ok ? "" : " (covft < freeze)") << "; ";
        }
        const double n = static_cast<double>(c.bench.seeds.size());
        os << "mean covft " << fmt(cov_sum / n) << " vs full_ft " << fmt(full_sum / n) << " (recorded, "
           << (cov_sum >= full_sum ? "covft >= full_ft" : "covft < full_ft") << ")";
        o.summary = os.str();
        report(std::move(o));
    }

    // ---- 7-8: analyze the trained covft runs -----------------------------------------

    void analyze() {
        if (!wanted(7) && !wanted(8)) return;
        const auto t0 = std::chrono::steady_clock::now();
        const ExperimentConfig c = base_config();
        std::vector<AnalyzeResult> res;
        for (const auto& dir : covft_runs_) res.push_back(run_analyze(dir, c.analysis, c.analysis_seed()));
        const double secs = since(t0);
        if (wanted(7)) {
            Outcome o{7, !res.empty(), {}, secs / std::max<double>(1.0, double(res.size()))};
            std::ostringstream os;
            for (std::size_t i = 0; i < res.size(); ++i) {
                const bool ok = res[i].routing_r > 0.3 && std::abs(res[i].routing_r_null) < 0.1;
                o.passed = o.passed && ok;
                os << covft_runs_[i].filename().string() << ": r " << fmt(res[i].routing_r) << ", shuffled "
                   << fmt(res[i].routing_r_null) << (ok ? "" : " (fails)") << "; ";
            }
            os << c.analysis.pairs << " pairs, runtime limit 60 s per run";
            o.passed = o.passed && o.seconds < 60.0;
            o.summary = os.str();
            report(std::move(o));
        }
        if (wanted(8)) {
            Outcome o{8, res.size() == 3, {}, secs};
            std::ostringstream os;
            for (std::size_t i = 0; i < res.size(); ++i) {
                const bool ok = res[i].n >= 1000 && res[i].visual.lift_pct > 0.0 && res[i].text.lift_pct > 0.0;
                o.passed = o.passed && ok;
                os << covft_runs_[i].filename().string() << ": n " << res[i].n << ", visual lift "
                   << fmt(res[i].visual.lift_pct) << "%, text lift " << fmt(res[i].text.lift_pct) << "%"
                   << (ok ? "" : " (fails)") << "; ";
            }
            os << "k = " << c.analysis.k;
            o.summary = os.str();
            report(std::move(o));
        }
    }

    // ---- 10: ablation matrices ---------------------------------------------------------

    static bool well_formed(const fs::path& csv, const std::vector<std::string>& variants, std::string& why) {
        std::ifstream in(csv);
        std::string line;
        if (!std::getline(in, line) || !line.starts_with("variant,n_ok,n_failed,") ||
            !line.ends_with(",macro_mean,macro_std")) {
            why = "bad header";
            return false;
        }
        const auto columns = std::count(line.begin(), line.end(), ',');
        std::vector<std::string> seen;
        while (std::getline(in, line)) {
            if (std::count(line.begin(), line.end(), ',') != columns) {
                why = "ragged row";
                return false;
            }
            seen.push_back(line.substr(0, line.find(',')));
            const auto last_two = line.substr(line.rfind(',', line.rfind(',') - 1) + 1);
            const double macro = std::stod(last_two);
            if (!(macro >= 0.0 && macro <= 1.0)) {
                why = "macro_mean out of range";
                return false;
            }
        }
        if (seen != variants) {
            why = "variant rows differ from the matrix";
            return false;
        }
        return true;
    }

    void ablations() {
        if (!wanted(10)) return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o{10, true, {}, 0.0};
        std::ostringstream os;
        for (MatrixAxis axis : {MatrixAxis::routing, MatrixAxis::context, MatrixAxis::experts, MatrixAxis::diversity}) {
            const ExperimentConfig c = ablation_config(axis);
            const fs::path dir = out_ / ("bench_" + std::string(axis_name(axis)));
            const BenchResult r = run_bench(c, dir, 1);
            std::string why;
            const bool ok = r.all_ok() && well_formed(dir / "bench.csv", default_axis_values(axis), why);
            o.passed = o.passed && ok;
            os << axis_name(axis) << " {";
            for (std::size_t i = 0; i < r.cells.size(); ++i)
                os << (i ? ", " : "") << r.cells[i].variant << " "
                   << (r.cells[i].ok ? fmt(r.cells[i].eval->macro_mean(), 3) : "FAILED");
            os << "}" << (ok ? "" : " (" + (why.empty() ? std::string("cell failed") : why) + ")") << "; ";
        }
        o.seconds = since(t0);
        os << "reduced budget: 100 + 200 steps, 1 seed";
        o.summary = os.str();
        report(std::move(o));
    }

    // ---- 11: determinism ------------------------------------------------------------------

    static std::map<std::string, std::string> digests(const fs::path& root) {
        static const std::set<std::string> metric_files{"verify.json", "bench.csv", "bench_cells.csv", "eval.csv",
                                                        "run.jsonl",   "model.bin", "probes.jsonl",    "meta.json"};
        std::map<std::string, std::string> out;
        for (const auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file() && metric_files.count(e.path().filename().string()))
                out[fs::relative(e.path(), root).string()] = file_digest(e.path());
        return out;
    }

    void determinism() {
        if (!wanted(11)) return;
        const auto t0 = std::chrono::steady_clock::now();
        const fs::path a = out_ / "determinism" / "a", b = out_ / "determinism" / "b";
        fs::remove_all(out_ / "determinism");
        ExperimentConfig c = ablation_config(MatrixAxis::routing);
        set_config_value(c, "bench.values", "dense,random_2");
        for (const fs::path& root : {a, b}) {
            run_verify(base_config(), root / "verify");
            run_bench(c, root / "bench_routing", 1);
        }
        const auto da = digests(a), db = digests(b);
        std::size_t differing = 0;
        std::string first;
        for (const auto& [file, d] : da) {
            const auto it = db.find(file);
            if (it == db.end() || it->second != d) {
                if (!differing) first = file;
                ++differing;
            }
        }
        const bool ok = !da.empty() && da.size() == db.size() && differing == 0;
        report({11, ok,
                std::to_string(da.size()) + " metric files compared across two same-seed runs (verify + routing bench), " +
                    std::to_string(differing) + " differ" + (first.empty() ? "" : ", first " + first),
                since(t0)});
    }

    int finish(double total) {
        json j = json::array();
        std::size_t passed = 0;
        for (const auto& o : outcomes_) {
            passed += o.passed;
            j.push_back({{"criterion", o.id}, {"passed", o.passed}, {"summary", o.summary}, {"seconds", o.seconds}});
        }
        std::ofstream(out_ / "acceptance.json") << j.dump(2) << '\n';
        std::cout << passed << "/" << outcomes_.size() << " criteria passed, total " << std::fixed
                  << std::setprecision(0) << total << " s" << std::endl;
        return passed == outcomes_.size() ? 0 : 1;
    }

private:
    fs::path out_;
    std::set<int> only_;
    std::vector<Outcome> outcomes_;
    std::vector<fs::path> covft_runs_;
    double bench_seconds_ = 0.0;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"covft-lab acceptance suite"};
    std::string out = "acceptance";
    std::vector<int> only;
    app.add_option("--out", out, "artifact directory");
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out);
    Suite suite(out, {only.begin(), only.end()});
    try {
        suite.verify();
        suite.conflict();
        suite.strategy_bench();
        suite.analyze();
        suite.ablations();
        suite.determinism();
    } catch (const std::exception& e) {
        std::cout << "acceptance aborted: " << e.what() << std::endl;
        return 2;
    }
    return suite.finish(since(t0));
}
