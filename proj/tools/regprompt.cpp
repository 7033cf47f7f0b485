#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "regprompt/fusion.hpp"
#include "regprompt/log.hpp"
#include "regprompt/metrics.hpp"
#include "regprompt/phantom.hpp"
#include "regprompt/protocol.hpp"
#include "regprompt/registration.hpp"
#include "regprompt/segmenter.hpp"
#include "regprompt/volume_io.hpp"

#include "protocol_fixtures.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace regprompt;

namespace {

enum Exit : int { ok = 0, usage = 2, data = 3, backend = 4, structure_failure = 5 };

struct Globals {
    std::string config_path;
    int threads = 0;
    std::string log_format = "text";
    std::uint64_t seed = 0;
};

/// Settings that may come from --config; explicit flags win.
struct Settings {
    RegistrationConfig registration;
    std::optional<std::string> segmenter;
    std::optional<double> timeout_s;
    std::optional<FilterPolicy> policy;
    double inverse_tolerance_mm = 0.1;
    int inverse_max_iterations = 100;
};

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// A config file either holds the sections below or is a bare RegistrationConfig object.
Settings load_settings(const std::string& path) {
    Settings s;
    if (path.empty()) return s;
    const json j = read_json(path);
    if (!j.is_object()) throw DataError(path + ": config must be a JSON object");
    static const std::set<std::string> sections{"registration",   "segmenter",           "timeout_s", "filter_policy",
                                                "inverse_tolerance_mm", "inverse_max_iterations"};
    const bool sectioned =
        std::any_of(sections.begin(), sections.end(), [&](const std::string& k) { return j.contains(k); });
    if (!sectioned) {
        s.registration = config_from_json(j);
        return s;
    }
    try {
        for (const auto& [key, value] : j.items()) {
            if (!sections.contains(key)) throw DataError(path + ": unknown config key '" + key + "'");
            if (key == "registration") s.registration = config_from_json(value);
            if (key == "segmenter") s.segmenter = value.get<std::string>();
            if (key == "timeout_s") s.timeout_s = value.get<double>();
            if (key == "filter_policy") s.policy = policy_from_json(value);
            if (key == "inverse_tolerance_mm") s.inverse_tolerance_mm = value.get<double>();
            if (key == "inverse_max_iterations") s.inverse_max_iterations = value.get<int>();
        }
    } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return s;
}

std::chrono::milliseconds timeout_from(double seconds) {
    if (!(seconds > 0.0)) throw PreconditionError("timeout must be positive");
    return std::chrono::milliseconds(static_cast<long long>(seconds * 1000.0));
}

int effective_threads(int requested) {
    if (requested > 0) return requested;
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

std::string mask_file(const StructureId& s, const std::string& format) {
    return s.name() + (format == "raw" ? ".json" : ".nii");
}

/// Structure masks found in a directory as <structure>.nii or <structure>.json (provenance.json excluded).
MaskSet load_mask_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && (e.path().extension() == ".nii" || e.path().extension() == ".json") &&
            e.path().filename() != "provenance.json")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    MaskSet masks;
    for (const auto& f : files) {
        const StructureId id(f.stem().string());
        if (masks.contains(id)) throw DataError("structure '" + id.name() + "' appears twice in " + dir.string());
        const Volume3D v = load_volume(f);
        masks.emplace(id, v.is_mask() ? v : threshold_mask(v, 0.5));
    }
    return masks;
}

void save_phantom(const Phantom& ph, const fs::path& dir, const std::string& format) {
    fs::create_directories(dir / "masks");
    const std::string ext = format == "raw" ? ".json" : ".nii";
    save_volume(ph.image, dir / ("image" + ext));
    save_prompts(ph.prompts, dir / "prompts.json");
    for (const auto& [s, m] : ph.masks) save_volume(m, dir / "masks" / mask_file(s, format));
}

json library_entry(const std::string& id, const Phantom& ph, const std::string& format) {
    const std::string ext = format == "raw" ? ".json" : ".nii";
    json masks = json::object();
    for (const auto& [s, m] : ph.masks) masks[s.name()] = id + "/masks/" + mask_file(s, format);
    return {{"id", id}, {"image", id + "/image" + ext}, {"prompts", id + "/prompts.json"}, {"masks", masks}};
}

// ---------------------------------------------------------------------------------------------------------

struct PhantomArgs {
    std::string out_dir;
    int references = 5;
    std::string spec_path;
    std::string format = "nii";
    DeformationSpec deform;
};

int run_phantom(const Globals& g, const PhantomArgs& a) {
    PhantomSpec spec;
    if (!a.spec_path.empty()) spec = phantom_spec_from_json(read_json(a.spec_path));
    const PhantomCase c = make_case(spec, a.deform, a.references, g.seed);
    const fs::path out(a.out_dir);
    save_phantom(c.target, out / "new", a.format);
    json entries = json::array();
    for (std::size_t r = 0; r < c.references.size(); ++r) {
        const std::string id = "ref" + std::to_string(r + 1);
        save_phantom(c.references[r], out / id, a.format);
        entries.push_back(library_entry(id, c.references[r], a.format));
    }
    write_json(out / "library.json", {{"entries", entries}});
    json deformations = json::array();
    for (const auto& d : c.deformations) deformations.push_back(transform_to_json(d));
    write_json(out / "phantom.json", {{"seed", g.seed},
                                      {"spec", phantom_spec_to_json(spec)},
                                      {"deformation",
                                       {{"max_translation_mm", a.deform.max_translation_mm},
                                        {"max_rotation_deg", a.deform.max_rotation_deg},
                                        {"max_log_scale", a.deform.max_log_scale},
                                        {"ffd_spacing_mm", a.deform.ffd_spacing_mm},
                                        {"ffd_max_mm", a.deform.ffd_max_mm}}},
                                      {"transforms", deformations}});
    log::info("phantom.done", {{"out_dir", a.out_dir}, {"references", a.references}});
    return Exit::ok;
}

struct PreprocessArgs {
    std::string in, out;
    std::vector<int> dims;
    std::vector<double> clip{0.0, 3000.0};
};

int run_preprocess(const PreprocessArgs& a) {
    if (!(a.clip[0] < a.clip[1])) throw PreconditionError("--clip needs lo < hi");
    const Volume3D v = load_volume(a.in);
    save_volume(preprocess(v, {a.dims[0], a.dims[1], a.dims[2]}, a.clip[0], a.clip[1]), a.out);
    return Exit::ok;
}

struct RegisterArgs {
    std::string fixed, moving, out, dense_out, warped, summary;
};

int run_register(const Settings& s, const RegisterArgs& a) {
    s.registration.validate();
    const Volume3D fixed = load_volume(a.fixed);
    const Volume3D moving = load_volume(a.moving);
    const RegistrationResult r = register_images(fixed, moving, s.registration);
    write_json(a.out, transform_to_json(r.transform));
    const SpatialTransform t(r.transform);
    if (!a.dense_out.empty()) {
        const DenseDisplacementField f = dense_displacement(t, fixed.grid());
        VectorVolume vv{fixed.grid(), 3, {}};
        vv.data.reserve(3 * f.vectors.size());
        for (const Vec3& d : f.vectors)
            for (double c : {d.x, d.y, d.z}) vv.data.push_back(static_cast<float>(c));
        save_vector_volume(vv, a.dense_out);
    }
    if (!a.warped.empty())
        save_volume(resample_through(moving, fixed.grid(), t, Interpolation::trilinear), a.warped);
    if (!a.summary.empty()) write_json(a.summary, result_summary_json(r));
    log::info("register.done", {{"final_cost", r.final_cost}});
    return Exit::ok;
}

struct SegmentArgs {
    std::string new_image, library, strategy, segmenter, registration, policy, out_dir;
    std::string format = "nii";
    std::vector<std::string> structures;
    double timeout_s = 0.0;
};

int run_segment(const Globals& g, Settings s, const SegmentArgs& a) {
    FusionConfig cfg;
    cfg.registration = a.registration.empty() ? s.registration : config_from_json(read_json(a.registration));
    cfg.registration.validate();
    cfg.policy = !a.policy.empty() ? load_policy(a.policy) : s.policy.value_or(FilterPolicy::knee_pd());
    for (const auto& name : a.structures) cfg.structures.emplace_back(name);
    cfg.threads = effective_threads(g.threads);
    cfg.inverse_tolerance_mm = s.inverse_tolerance_mm;
    cfg.inverse_max_iterations = s.inverse_max_iterations;

    const Strategy strategy = parse_strategy(a.strategy);
    const std::string seg_spec = !a.segmenter.empty() ? a.segmenter : s.segmenter.value_or("toy");
    const double timeout = a.timeout_s > 0.0 ? a.timeout_s : s.timeout_s.value_or(120.0);
    std::unique_ptr<Segmenter> seg = make_segmenter(seg_spec, timeout_from(timeout));

    const Volume3D newimg = load_volume(a.new_image);
    const ReferenceLibrary lib = load_library(a.library);
    const FusionResult r = run_strategy(strategy, newimg, lib, cfg, *seg);

    const fs::path out(a.out_dir);
    fs::create_directories(out);
    for (const auto& [st, m] : r.fused) save_volume(m, out / mask_file(st, a.format));
    json prov = r.provenance();
    prov["segmenter"] = seg->info().name;
    prov["registration_config"] = config_to_json(cfg.registration);
    write_json(out / "provenance.json", prov);

    if (r.failed_structures.empty()) return Exit::ok;
    const bool backend_failure = std::any_of(r.candidates.begin(), r.candidates.end(), [](const CandidateRecord& c) {
        return c.status == CandidateStatus::dropped && c.reason.starts_with("backend:");
    });
    for (const auto& st : r.failed_structures) log::warn("segment.structure_failed", {{"structure", st.name()}});
    return backend_failure ? Exit::backend : Exit::structure_failure;
}

struct EvaluateArgs {
    std::string pred_dir, gt_dir, out, csv, case_id, strategy;
};

int run_evaluate(const EvaluateArgs& a) {
    const MaskSet gt = load_mask_dir(a.gt_dir);
    if (gt.empty()) throw DataError("no ground-truth masks in " + a.gt_dir);
    if (!fs::is_directory(a.pred_dir)) throw DataError(a.pred_dir + " is not a directory");
    MaskSet pred;
    for (const auto& [s, m] : gt) {
        for (const char* ext : {".nii", ".json"}) {
            const fs::path p = fs::path(a.pred_dir) / (s.name() + ext);
            if (fs::exists(p)) {
                const Volume3D v = load_volume(p);
                pred.emplace(s, v.is_mask() ? v : threshold_mask(v, 0.5));
                break;
            }
        }
    }
    std::string strategy = a.strategy;
    const fs::path prov = fs::path(a.pred_dir) / "provenance.json";
    if (strategy.empty() && fs::exists(prov)) strategy = read_json(prov).value("strategy", "");
    if (strategy.empty()) strategy = "unknown";
    const EvaluationReport rep = evaluate_case(pred, gt, a.case_id, strategy);
    write_json(a.out, rep.to_json());
    if (!a.csv.empty()) {
        std::string text = EvaluationReport::csv_header() + "\n";
        for (const auto& row : rep.csv_rows()) text += row + "\n";
        write_text(a.csv, text);
    }
    return Exit::ok;
}

struct ProtocolCheckArgs {
    std::string segmenter, fixtures, write_fixtures;
    double timeout_s = 30.0;
};

int run_protocol_check(const ProtocolCheckArgs& a) {
    std::vector<std::string> lines;
    if (!a.fixtures.empty()) {
        std::ifstream in(a.fixtures);
        if (!in) throw DataError("cannot open " + a.fixtures);
        for (std::string l; std::getline(in, l);)
            if (!l.empty()) lines.push_back(l);
    } else {
        lines = tools::golden_fixture_lines();
    }
    if (!a.write_fixtures.empty()) {
        std::string text;
        for (const auto& l : lines) text += l + "\n";
        write_text(a.write_fixtures, text);
        if (a.segmenter.empty()) return Exit::ok;
    }
    if (a.segmenter.empty()) throw PreconditionError("--segmenter is required unless only writing fixtures");

    auto channel = open_backend_channel(a.segmenter);
    const auto timeout = timeout_from(a.timeout_s);
    std::size_t failures = 0;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const tools::FixtureVerdict v = tools::check_fixture(*channel, lines[i], timeout);
        std::cout << (v.pass ? "PASS" : "FAIL") << " fixture " << i + 1 << " " << v.label << ": " << v.detail << "\n";
        failures += !v.pass;
    }
    std::cout << (lines.size() - failures) << "/" << lines.size() << " fixtures conform\n";
    return failures == 0 ? Exit::ok : Exit::backend;
}

template <typename F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const PreconditionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::usage;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return Exit::backend;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::data;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::data;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Registration-enabled prompt engineering for promptable segmentation"};
    app.name("regprompt");
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config_path, "JSON config: a RegistrationConfig object, or sections "
                                              "{registration, segmenter, timeout_s, filter_policy, "
                                              "inverse_tolerance_mm, inverse_max_iterations}")
        ->check(CLI::ExistingFile);
    app.add_option("--threads", g.threads, "Worker threads for per-reference work (default: available cores)")
        ->check(CLI::PositiveNumber);
    app.add_option("--log", g.log_format, "Log format on stderr")->check(CLI::IsMember({"text", "json"}));
    app.add_option("--seed", g.seed, "Master seed for all randomness");

    PhantomArgs ph;
    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic knee case: new image plus reference library");
    phantom->add_option("--out-dir", ph.out_dir, "Output directory")->required();
    phantom->add_option("--references", ph.references, "Number of reference patients")->check(CLI::NonNegativeNumber);
    phantom->add_option("--spec", ph.spec_path, "PhantomSpec JSON overriding the default geometry")
        ->check(CLI::ExistingFile);
    phantom->add_option("--format", ph.format, "Volume format")->check(CLI::IsMember({"nii", "raw"}));
    phantom->add_option("--max-translation-mm", ph.deform.max_translation_mm, "Patient deformation: translation bound");
    phantom->add_option("--max-rotation-deg", ph.deform.max_rotation_deg, "Patient deformation: rotation bound about z");
    phantom->add_option("--max-log-scale", ph.deform.max_log_scale, "Patient deformation: log-scale bound per axis");
    phantom->add_option("--ffd-spacing-mm", ph.deform.ffd_spacing_mm, "Patient deformation: FFD control spacing");
    phantom->add_option("--ffd-max-mm", ph.deform.ffd_max_mm, "Patient deformation: peak FFD displacement (0 = none)");

    PreprocessArgs pp;
    auto* prep = app.add_subcommand("preprocess", "Center-crop or pad to fixed dims and clip intensities");
    prep->add_option("--in", pp.in, "Input volume")->required()->check(CLI::ExistingFile);
    prep->add_option("--out", pp.out, "Output volume")->required();
    prep->add_option("--dims", pp.dims, "Target dims X,Y,Z")->required()->expected(3)->delimiter(',');
    prep->add_option("--clip", pp.clip, "Intensity window LO,HI")->expected(2)->delimiter(',');

    RegisterArgs rg;
    auto* reg = app.add_subcommand("register", "Affine + FFD registration (pull-back map fixed -> moving)");
    reg->add_option("--fixed", rg.fixed, "Fixed image")->required()->check(CLI::ExistingFile);
    reg->add_option("--moving", rg.moving, "Moving image")->required()->check(CLI::ExistingFile);
    reg->add_option("--out", rg.out, "Transform JSON")->required();
    reg->add_option("--dense-out", rg.dense_out, "Dense displacement field on the fixed grid (raw+json)");
    reg->add_option("--warped", rg.warped, "Moving image resampled onto the fixed grid");
    reg->add_option("--summary", rg.summary, "Per-level optimisation summary JSON");

    SegmentArgs sg;
    auto* seg = app.add_subcommand("segment", "Segment a new image from a prompt-labelled reference library");
    seg->add_option("--new", sg.new_image, "New image")->required()->check(CLI::ExistingFile);
    seg->add_option("--library", sg.library, "Library manifest JSON")->required()->check(CLI::ExistingFile);
    seg->add_option("--strategy", sg.strategy, "Fusion strategy")
        ->required()
        ->check(CLI::IsMember({"i-align", "p-align", "atlas", "noreg"}));
    seg->add_option("--segmenter", sg.segmenter, "toy[:tau], exec:<command> or tcp:<host>:<port> (default toy)");
    seg->add_option("--registration", sg.registration, "RegistrationConfig JSON (overrides --config)")
        ->check(CLI::ExistingFile);
    seg->add_option("--policy", sg.policy, "Prompt filter policy JSON (default knee PD)")->check(CLI::ExistingFile);
    seg->add_option("--structures", sg.structures, "Structures to fuse (default: all in the library)")
        ->delimiter(',');
    seg->add_option("--timeout-s", sg.timeout_s, "Per-request backend timeout in seconds (default 120)");
    seg->add_option("--format", sg.format, "Mask format")->check(CLI::IsMember({"nii", "raw"}));
    seg->add_option("--out-dir", sg.out_dir, "Output directory for masks and provenance.json")->required();

    EvaluateArgs ev;
    ev.case_id = "case";
    auto* eval = app.add_subcommand("evaluate", "Dice, VOE and RMSD of predicted masks against ground truth");
    eval->add_option("--pred-dir", ev.pred_dir, "Directory of predicted <structure> masks")->required();
    eval->add_option("--gt-dir", ev.gt_dir, "Directory of ground-truth <structure> masks")->required();
    eval->add_option("--out", ev.out, "Report JSON")->required();
    eval->add_option("--csv", ev.csv, "Report CSV");
    eval->add_option("--case", ev.case_id, "Case id written to the report");
    eval->add_option("--strategy", ev.strategy, "Strategy tag (default: from provenance.json)");

    ProtocolCheckArgs pc;
    auto* check = app.add_subcommand("protocol-check", "Send the golden fixture suite to an external backend");
    check->add_option("--segmenter", pc.segmenter, "exec:<command> or tcp:<host>:<port>");
    check->add_option("--fixtures", pc.fixtures, "NDJSON fixture file (default: built-in suite)")
        ->check(CLI::ExistingFile);
    check->add_option("--write-fixtures", pc.write_fixtures, "Write the fixture lines to this file");
    check->add_option("--timeout-s", pc.timeout_s, "Per-request timeout in seconds");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return Exit::usage;
    }

    log::configure(g.log_format == "json" ? log::Format::json : log::Format::text, log::Level::info);

    return guarded([&] {
        const Settings settings = load_settings(g.config_path);
        if (phantom->parsed()) return run_phantom(g, ph);
        if (prep->parsed()) return run_preprocess(pp);
        if (reg->parsed()) return run_register(settings, rg);
        if (seg->parsed()) return run_segment(g, settings, sg);
        if (eval->parsed()) return run_evaluate(ev);
        return run_protocol_check(pc);
    });
}
