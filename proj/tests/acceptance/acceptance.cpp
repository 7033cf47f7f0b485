// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments select criteria by key.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "regprompt/fusion.hpp"
#include "regprompt/metrics.hpp"
#include "regprompt/phantom.hpp"
#include "regprompt/registration.hpp"
#include "regprompt/segmenter.hpp"
#include "regprompt/volume_io.hpp"

using namespace regprompt;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr int kAffineCases = 10;
constexpr double kMaxTranslationMm = 8.0;
constexpr double kMaxRotationDeg = 10.0;
constexpr double kScaleLo = 0.9, kScaleHi = 1.1;
constexpr double kTranslationTolMm = 0.5;
constexpr double kScaleTol = 0.02;
constexpr double kAffineRuntimeS = 60.0;

constexpr int kFfdCases = 5;
constexpr double kFfdMaxMm = 4.0;
constexpr double kFfdMeanErrorMm = 1.0;
constexpr double kFfdBoneDice = 0.98;

constexpr int kGradientConfigs = 20;
constexpr double kGradientRelTol = 1e-3;
constexpr double kGradientStep = 1e-3;

constexpr double kInverseTolMm = 0.1;
constexpr double kInverseFraction = 0.99;

constexpr int kReferences = 5;
constexpr std::uint64_t kCaseSeed = 11;
constexpr double kBoneDice = 0.90;
constexpr double kCartilageDice = 0.70;
constexpr double kCaseRuntimeS = 600.0;

constexpr double kCrossBoneDice = 0.85;
constexpr double kNoRegMargin = 0.05;
constexpr double kCoarseLatticeMm = 48.0;

constexpr int kOracleTrials = 100;
constexpr double kRmsdTol = 1e-9;
constexpr double kIdentityTol = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    if constexpr (sizeof...(Args) == 0)
        return f;
    else
        std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

bool is_cartilage(const StructureId& s) {
    return s == StructureId::femoral_cartilage() || s == StructureId::tibial_cartilage();
}

Volume3D bone_foreground(const MaskSet& m) {
    const Volume3D& f = m.at(StructureId::femur());
    const Volume3D& t = m.at(StructureId::tibia());
    std::vector<float> d(f.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (f[i] != 0 || t[i] != 0) ? 1.0f : 0.0f;
    return Volume3D(f.grid(), VolumeKind::binary_mask, std::move(d));
}

Volume3D foreground(const MaskSet& m) {
    const Volume3D& first = m.begin()->second;
    std::vector<float> d(first.size(), 0.0f);
    for (const auto& [s, v] : m)
        for (std::size_t i = 0; i < d.size(); ++i)
            if (v[i] != 0) d[i] = 1.0f;
    return Volume3D(first.grid(), VolumeKind::binary_mask, std::move(d));
}

/// Trilinear pull of a binary mask through t, thresholded at one half.
Volume3D warp_mask_linear(const Volume3D& mask, const Grid& onto, const SpatialTransform& t) {
    const Volume3D as_float(mask.grid(), VolumeKind::intensity, std::vector<float>(mask.data().begin(), mask.data().end()));
    const Volume3D w = resample_through(as_float, onto, t, Interpolation::trilinear);
    std::vector<float> d(w.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = w[i] >= 0.5f ? 1.0f : 0.0f;
    return Volume3D(onto, VolumeKind::binary_mask, std::move(d));
}

Mat3 axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis * (1.0 / axis.norm());
    const double c = std::cos(angle), s = std::sin(angle), C = 1 - c;
    return Mat3{{c + a.x * a.x * C, a.x * a.y * C - a.z * s, a.x * a.z * C + a.y * s,
                 a.y * a.x * C + a.z * s, c + a.y * a.y * C, a.y * a.z * C - a.x * s,
                 a.z * a.x * C - a.y * s, a.z * a.y * C + a.x * s, c + a.z * a.z * C}};
}

Vec3 column_norms(const Mat3& m) {
    Vec3 n;
    for (int c = 0; c < 3; ++c)
        n[static_cast<std::size_t>(c)] = std::sqrt(m(0, c) * m(0, c) + m(1, c) * m(1, c) + m(2, c) * m(2, c));
    return n;
}

// ---------------------------------------------------------------------------------------------
// Recovery cases shared by the affine, FFD and inverse criteria.

struct RecoveryCase {
    std::string label;
    CompositeTransform recovered;
    Grid moving_grid;
};

struct AffineRecovery {
    std::vector<RecoveryCase> cases;
    Verdict verdict;
};

struct FfdRecovery {
    std::vector<RecoveryCase> cases;
    Verdict verdict;
};

AffineRecovery run_affine_recovery() {
    AffineRecovery out;
    const PhantomSpec base;
    std::mt19937_64 rng(20260);
    std::uniform_real_distribution<double> unit(-1.0, 1.0), scale(kScaleLo, kScaleHi), frac(0.0, 1.0);
    double worst_t = 0.0, worst_s = 0.0, worst_runtime = 0.0;
    bool ok = true;
    for (int c = 0; c < kAffineCases; ++c) {
        Vec3 dir{unit(rng), unit(rng), unit(rng)};
        Vec3 t = dir * (kMaxTranslationMm * std::cbrt(frac(rng)) / dir.norm());
        const Vec3 axis{unit(rng), unit(rng), unit(rng)};
        const double angle = frac(rng) * kMaxRotationDeg * std::numbers::pi / 180.0;
        const Vec3 s{scale(rng), scale(rng), scale(rng)};
        const AffineTransform generating{axis_angle(axis, angle) * Mat3::diagonal(s), t};

        const Phantom fixed = make_phantom(base, derive_seed(100 + c, 0), "fixed");
        PhantomSpec ms = base;
        ms.deformation = CompositeTransform{generating, std::nullopt};
        const Phantom moving = make_phantom(ms, derive_seed(100 + c, 1), "moving");

        const auto t0 = Clock::now();
        RegistrationConfig cfg;
        cfg.enable_ffd = false;
        const RegistrationResult r = register_affine(fixed.image, moving.image, cfg);
        const double runtime = seconds_since(t0);

        // The recovered map goes fixed -> moving; its inverse reproduces the generating affine.
        const AffineTransform back = r.transform.affine.inverse();
        const Vec3 sn = column_norms(back.matrix);
        double et = 0.0, es = 0.0;
        for (std::size_t a = 0; a < 3; ++a) {
            et = std::max(et, std::abs(back.translation[a] - t[a]));
            es = std::max(es, std::abs(sn[a] / s[a] - 1.0));
        }
        worst_t = std::max(worst_t, et);
        worst_s = std::max(worst_s, es);
        worst_runtime = std::max(worst_runtime, runtime);
        ok = ok && et <= kTranslationTolMm && es <= kScaleTol && runtime <= kAffineRuntimeS;
        out.cases.push_back({"affine" + std::to_string(c + 1), r.transform, moving.image.grid()});
        std::printf("  affine case %d: |t|=%.2f mm rot=%.2f deg scale=(%.3f,%.3f,%.3f) -> translation err %.3f mm, "
                    "scale err %.2f%%, %.1f s\n",
                    c + 1, t.norm(), angle * 180.0 / std::numbers::pi, s.x, s.y, s.z, et, 100 * es, runtime);
        std::fflush(stdout);
    }
    out.verdict = {ok, fmt("%d cases, worst translation error %.3f mm (<= %.1f), worst scale error %.2f%% (<= %.0f%%), "
                           "slowest %.1f s (<= %.0f s)",
                           kAffineCases, worst_t, kTranslationTolMm, 100 * worst_s, 100 * kScaleTol, worst_runtime,
                           kAffineRuntimeS)};
    return out;
}

FfdRecovery run_ffd_recovery() {
    FfdRecovery out;
    const PhantomSpec base;
    DeformationSpec d;
    d.max_translation_mm = 0.0;
    d.max_rotation_deg = 0.0;
    d.max_log_scale = 0.0;
    d.ffd_max_mm = kFfdMaxMm;
    double worst_err = 0.0, worst_dice = 1.0;
    bool ok = true;
    for (int c = 0; c < kFfdCases; ++c) {
        const Phantom fixed = make_phantom(base, derive_seed(200 + c, 0), "fixed");
        PhantomSpec ms = base;
        ms.deformation = random_deformation(d, base.grid(), derive_seed(200 + c, 2));
        const Phantom moving = make_phantom(ms, derive_seed(200 + c, 1), "moving");
        const SpatialTransform truth(*ms.deformation);

        const auto t0 = Clock::now();
        const RegistrationResult r = register_images(fixed.image, moving.image, RegistrationConfig{});
        const double runtime = seconds_since(t0);
        const SpatialTransform rec(r.transform);

        // Composite error: the generating pull-back after the recovered map should be the identity.
        const Volume3D fg = foreground(fixed.masks);
        const Grid& g = fixed.image.grid();
        double sum = 0.0;
        std::size_t n = 0, idx = 0;
        for (int k = 0; k < g.dims.z; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i, ++idx) {
                    if (fg[idx] == 0) continue;
                    const Vec3 x = g.to_world(i, j, k);
                    sum += (truth.apply(rec.apply(x)) - x).norm();
                    ++n;
                }
        const double mean_err = sum / static_cast<double>(n);
        const double bd = dice(warp_mask_linear(bone_foreground(moving.masks), g, rec), bone_foreground(fixed.masks));
        worst_err = std::max(worst_err, mean_err);
        worst_dice = std::min(worst_dice, bd);
        ok = ok && mean_err <= kFfdMeanErrorMm && bd >= kFfdBoneDice;
        out.cases.push_back({"ffd" + std::to_string(c + 1), r.transform, moving.image.grid()});
        std::printf("  ffd case %d: mean field error %.3f mm over %zu foreground voxels, bone Dice %.4f, %.1f s\n", c + 1,
                    mean_err, n, bd, runtime);
        std::fflush(stdout);
    }
    out.verdict = {ok, fmt("%d cases, worst mean field error %.3f mm (<= %.1f), worst bone Dice %.4f (>= %.2f)",
                           kFfdCases, worst_err, kFfdMeanErrorMm, worst_dice, kFfdBoneDice)};
    return out;
}

// ---------------------------------------------------------------------------------------------
// Gradient check on 8^3 configurations. The fixed grid sits strictly inside the moving footprint and the
// moving image is multilinear, so the objective is smooth and central differences are meaningful.

Verdict run_gradient_check() {
    std::mt19937_64 rng(4242);
    std::uniform_real_distribution<double> u(-1.0, 1.0), centre(1.0, 6.0), width(1.5, 3.0), amp(0.3, 1.0);
    double worst_ffd = 0.0, worst_affine = 0.0;
    const auto rel = [](double a, double b) {
        const double den = std::max(std::abs(a), std::abs(b));
        return den > 0.0 ? std::abs(a - b) / den : 0.0;
    };
    for (int c = 0; c < kGradientConfigs; ++c) {
        const Grid fg{{8, 8, 8}, {0.6, 0.6, 0.6}, {1.4, 1.4, 1.4}};
        struct Blob {
            Vec3 c;
            double w, a;
        };
        std::vector<Blob> blobs;
        for (int b = 0; b < 4; ++b) blobs.push_back({{centre(rng), centre(rng), centre(rng)}, width(rng), amp(rng)});
        std::vector<float> fd(fg.voxel_count());
        std::size_t q = 0;
        for (int k = 0; k < 8; ++k)
            for (int j = 0; j < 8; ++j)
                for (int i = 0; i < 8; ++i) {
                    const Vec3 p = fg.to_world(i, j, k);
                    double v = 0.0;
                    for (const auto& b : blobs) v += b.a * std::exp(-(p - b.c).dot(p - b.c) / (2 * b.w * b.w));
                    fd[q++] = static_cast<float>(v);
                }
        const Volume3D fixed(fg, VolumeKind::intensity, std::move(fd));

        double co[8];
        for (double& x : co) x = u(rng);
        std::vector<float> md(512);
        q = 0;
        for (int k = 0; k < 8; ++k)
            for (int j = 0; j < 8; ++j)
                for (int i = 0; i < 8; ++i) {
                    const double x = i / 7.0, y = j / 7.0, z = k / 7.0;
                    md[q++] = static_cast<float>(co[0] + co[1] * x + co[2] * y + co[3] * z + co[4] * x * y +
                                                 co[5] * x * z + co[6] * y * z + co[7] * x * y * z);
                }
        const Volume3D moving(Grid{{8, 8, 8}, {1, 1, 1}, {}}, VolumeKind::intensity, std::move(md));

        const AffineTransform init{Mat3{{1 + 0.03 * u(rng), 0.03 * u(rng), 0.03 * u(rng), 0.03 * u(rng),
                                         1 + 0.03 * u(rng), 0.03 * u(rng), 0.03 * u(rng), 0.03 * u(rng),
                                         1 + 0.03 * u(rng)}},
                                   {0.4 * u(rng), 0.4 * u(rng), 0.4 * u(rng)}};
        const FFDTransform lattice({4, 4, 4}, {3.5, 3.5, 3.5}, {-3.5, -3.5, -3.5});
        const FfdObjective fo(fixed, moving, init, lattice, 0.65);
        std::vector<double> phi(fo.parameter_count());
        for (auto& p : phi) p = 0.5 * u(rng);
        std::vector<double> g(phi.size());
        (void)fo.value_and_gradient(phi, g);
        for (std::size_t i = 0; i < phi.size(); ++i) {
            auto a = phi, b = phi;
            a[i] += kGradientStep;
            b[i] -= kGradientStep;
            worst_ffd = std::max(worst_ffd, rel(g[i], (fo.value(a) - fo.value(b)) / (2 * kGradientStep)));
        }

        const AffineParameterization par({3.5, 3.5, 3.5}, 5.0, AffineDof::full12);
        const AffineObjective ao(fixed, moving, par);
        std::vector<double> p(par.size());
        for (auto& x : p) x = 0.3 * u(rng);
        std::vector<double> ga(p.size());
        (void)ao.value_and_gradient(p, ga);
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto a = p, b = p;
            a[i] += kGradientStep;
            b[i] -= kGradientStep;
            worst_affine = std::max(worst_affine, rel(ga[i], (ao.value(a) - ao.value(b)) / (2 * kGradientStep)));
        }
    }
    return {worst_ffd <= kGradientRelTol && worst_affine <= kGradientRelTol,
            fmt("%d configurations, worst relative error FFD %.2e, affine %.2e (<= %.0e)", kGradientConfigs, worst_ffd,
                worst_affine, kGradientRelTol)};
}

// ---------------------------------------------------------------------------------------------

Verdict run_inverse(const std::vector<RecoveryCase>& cases) {
    bool ok = true;
    double worst_fraction = 1.0, worst_residual = 0.0;
    std::string failures;
    for (const auto& c : cases) {
        const SpatialTransform t(c.recovered);
        try {
            const InverseField inv = invert(t, c.moving_grid, kInverseTolMm);
            // Independent residual on the 2-voxel-eroded interior.
            const Grid& g = c.moving_grid;
            std::size_t n = 0, within = 0, idx = 0;
            for (int k = 0; k < g.dims.z; ++k)
                for (int j = 0; j < g.dims.y; ++j)
                    for (int i = 0; i < g.dims.x; ++i, ++idx) {
                        const bool interior = i >= 2 && j >= 2 && k >= 2 && i <= g.dims.x - 3 &&
                                              j <= g.dims.y - 3 && k <= g.dims.z - 3;
                        if (!interior) continue;
                        const Vec3 u = g.to_world(i, j, k);
                        const double r = (t.apply(u + inv.field.vectors[idx]) - u).norm();
                        worst_residual = std::max(worst_residual, r);
                        within += r <= kInverseTolMm;
                        ++n;
                    }
            const double fraction = static_cast<double>(within) / static_cast<double>(n);
            worst_fraction = std::min(worst_fraction, fraction);
            ok = ok && fraction >= kInverseFraction;
        } catch (const InversionError& e) {
            ok = false;
            worst_fraction = 0.0;
            failures += " " + c.label + ": " + e.what();
        }
    }
    return {ok, fmt("%zu recovery transforms, worst fraction within %.1f mm %.4f (>= %.2f), worst residual %.2e mm",
                    cases.size(), kInverseTolMm, worst_fraction, kInverseFraction, worst_residual) +
                    failures};
}

// ---------------------------------------------------------------------------------------------
// End-to-end phantom case shared by the pipeline criteria.

struct CaseRun {
    FusionResult result;
    EvaluationReport report;
    double seconds = 0.0;
};

ReferenceLibrary library_from(const PhantomCase& pc) {
    ReferenceLibrary lib;
    for (const auto& r : pc.references) lib.entries.push_back({r.prompts.owner, r.image, r.prompts, r.masks});
    return lib;
}

struct Pipeline {
    std::optional<PhantomCase> pc;
    std::optional<ReferenceLibrary> lib;
    std::unique_ptr<RegistrationCache> cache;
    std::optional<CaseRun> i_align, p_align, noreg;
    double case_generation_s = 0.0;

    void ensure_case() {
        if (pc) return;
        const auto t0 = Clock::now();
        pc = make_case(PhantomSpec{}, DeformationSpec{}, kReferences, kCaseSeed);
        lib = library_from(*pc);
        case_generation_s = seconds_since(t0);
        cache = std::make_unique<RegistrationCache>(pc->target.image);
    }

    CaseRun run(Strategy s, const FusionConfig& cfg, RegistrationCache* c) {
        const auto t0 = Clock::now();
        auto seg = make_segmenter("toy");
        CaseRun out;
        out.result = run_strategy(s, pc->target.image, *lib, cfg, *seg, c);
        out.report = evaluate_case(out.result.fused, pc->target.masks, "phantom", strategy_name(s));
        out.seconds = seconds_since(t0);
        return out;
    }

    const CaseRun& image_alignment() {
        ensure_case();
        if (!i_align) i_align = run(Strategy::image_alignment, FusionConfig{}, cache.get());
        return *i_align;
    }
    const CaseRun& prompt_alignment() {
        ensure_case();
        if (!p_align) p_align = run(Strategy::prompt_alignment, FusionConfig{}, cache.get());
        return *p_align;
    }
    const CaseRun& no_registration() {
        ensure_case();
        if (!noreg) noreg = run(Strategy::no_registration, FusionConfig{}, nullptr);
        return *noreg;
    }
};

double dice_of(const EvaluationReport& r, const StructureId& s) {
    const auto& m = r.structures.at(s);
    return m.dice ? *m.dice : 0.0;
}

std::string dice_list(const EvaluationReport& r) {
    std::string out;
    for (const auto& [s, m] : r.structures) out += fmt(" %s=%.4f", s.name().c_str(), m.dice ? *m.dice : 0.0);
    return out;
}

Verdict run_end_to_end(Pipeline& p) {
    const CaseRun& r = p.image_alignment();
    bool ok = r.result.failed_structures.empty();
    for (const auto& [s, m] : r.report.structures)
        ok = ok && m.dice && *m.dice >= (is_cartilage(s) ? kCartilageDice : kBoneDice);
    const double total = p.case_generation_s + r.seconds;
    ok = ok && total <= kCaseRuntimeS;
    return {ok, std::string("Dice") + dice_list(r.report) +
                    fmt(" (bone >= %.2f, cartilage >= %.2f); %.1f s single-threaded (<= %.0f s)", kBoneDice,
                        kCartilageDice, total, kCaseRuntimeS)};
}

Verdict run_cross_strategy(Pipeline& p) {
    const CaseRun& i = p.image_alignment();
    const CaseRun& a = p.prompt_alignment();
    const CaseRun& n = p.no_registration();
    bool ok = true;
    std::string detail = "Dice(I-align, P-align):";
    for (const auto& s : {StructureId::femur(), StructureId::tibia()}) {
        const double d = dice(i.result.fused.at(s), a.result.fused.at(s));
        ok = ok && d >= kCrossBoneDice;
        detail += fmt(" %s=%.4f", s.name().c_str(), d);
    }
    detail += fmt(" (>= %.2f); cartilage Dice i/p/noreg:", kCrossBoneDice);
    for (const auto& s : {StructureId::femoral_cartilage(), StructureId::tibial_cartilage()}) {
        const double di = dice_of(i.report, s), dp = dice_of(a.report, s), dn = dice_of(n.report, s);
        ok = ok && di >= dn + kNoRegMargin && dp >= dn + kNoRegMargin;
        detail += fmt(" %s=%.4f/%.4f/%.4f", s.name().c_str(), di, dp, dn);
    }
    return {ok, detail + fmt(" (margin >= %.2f)", kNoRegMargin)};
}

Verdict run_atlas_ordering(Pipeline& p) {
    p.ensure_case();
    FusionConfig cfg;
    cfg.registration.control_spacing_mm = Vec3{kCoarseLatticeMm, kCoarseLatticeMm, kCoarseLatticeMm};
    RegistrationCache coarse(p.pc->target.image);
    const CaseRun i = p.run(Strategy::image_alignment, cfg, &coarse);
    const CaseRun a = p.run(Strategy::prompt_alignment, cfg, &coarse);
    const CaseRun at = p.run(Strategy::atlas, cfg, &coarse);
    bool ok = true;
    std::string detail = fmt("%.0f mm lattice; cartilage Dice i/p/atlas:", kCoarseLatticeMm);
    for (const auto& s : {StructureId::femoral_cartilage(), StructureId::tibial_cartilage()}) {
        const double di = dice_of(i.report, s), dp = dice_of(a.report, s), da = dice_of(at.report, s);
        ok = ok && di >= da && dp >= da;
        detail += fmt(" %s=%.4f/%.4f/%.4f", s.name().c_str(), di, dp, da);
    }
    return {ok, detail};
}

// ---------------------------------------------------------------------------------------------
// Brute-force oracles.

struct Counts {
    double a = 0, b = 0, both = 0, uni = 0;
};

std::vector<Vec3> brute_surface(const Volume3D& m) {
    std::vector<Vec3> pts;
    const auto& d = m.dims();
    const auto fg = [&](int i, int j, int k) {
        return i >= 0 && j >= 0 && k >= 0 && i < d.x && j < d.y && k < d.z && m.at(i, j, k) != 0;
    };
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i)
                if (fg(i, j, k) && (!fg(i - 1, j, k) || !fg(i + 1, j, k) || !fg(i, j - 1, k) || !fg(i, j + 1, k) ||
                                    !fg(i, j, k - 1) || !fg(i, j, k + 1)))
                    pts.push_back(m.grid().to_world(i, j, k));
    return pts;
}

double brute_rmsd(const Volume3D& a, const Volume3D& b) {
    const auto sa = brute_surface(a), sb = brute_surface(b);
    const auto nearest = [](const Vec3& p, const std::vector<Vec3>& s) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : s) best = std::min(best, (p - q).dot(p - q));
        return best;
    };
    double sum = 0.0;
    for (const auto& p : sa) sum += nearest(p, sb);
    for (const auto& p : sb) sum += nearest(p, sa);
    return std::sqrt(sum / static_cast<double>(sa.size() + sb.size()));
}

Verdict run_oracles() {
    std::mt19937_64 rng(8675309);
    std::uniform_int_distribution<int> side(1, 8), ncand(1, 5), extra(0, 2);
    std::uniform_real_distribution<double> sp(0.5, 2.5), density(0.05, 0.8), unit(0.0, 1.0);
    const auto random_mask = [&](const Grid& g) {
        const double p = density(rng);
        std::vector<float> d(g.voxel_count());
        for (auto& v : d) v = unit(rng) < p ? 1.0f : 0.0f;
        return Volume3D(g, VolumeKind::binary_mask, std::move(d));
    };
    std::size_t vote_bad = 0, dice_bad = 0, voe_bad = 0, rmsd_bad = 0, identity_bad = 0;
    double worst_rmsd = 0.0, worst_identity = 0.0;
    for (int t = 0; t < kOracleTrials; ++t) {
        const Grid g{{side(rng), side(rng), side(rng)}, {sp(rng), sp(rng), sp(rng)}, {}};
        const Volume3D a = random_mask(g), b = random_mask(g);
        Counts c;
        for (std::size_t i = 0; i < a.size(); ++i) {
            c.a += a[i] != 0;
            c.b += b[i] != 0;
            c.both += a[i] != 0 && b[i] != 0;
            c.uni += a[i] != 0 || b[i] != 0;
        }
        const double d = c.a + c.b == 0 ? 1.0 : 2 * c.both / (c.a + c.b);
        const double v = c.uni == 0 ? 0.0 : 1 - c.both / c.uni;
        dice_bad += dice(a, b) != d;
        voe_bad += voe(a, b) != v;
        const double id = std::abs(voe(a, b) - (1 - dice(a, b) / (2 - dice(a, b))));
        worst_identity = std::max(worst_identity, id);
        identity_bad += id > kIdentityTol;
        const auto r = rmsd(a, b);
        if (c.a > 0 && c.b > 0) {
            const double e = r ? std::abs(*r - brute_rmsd(a, b)) : std::numeric_limits<double>::infinity();
            worst_rmsd = std::max(worst_rmsd, e);
            rmsd_bad += e > kRmsdTol;
        } else {
            rmsd_bad += r.has_value();
        }

        std::vector<Volume3D> cands{a, b};
        const int k = ncand(rng);
        while (static_cast<int>(cands.size()) < k) cands.push_back(random_mask(g));
        cands.resize(static_cast<std::size_t>(k));
        const std::size_t n_total = cands.size() + static_cast<std::size_t>(extra(rng));
        const Volume3D fused = majority_vote(cands, n_total);
        for (std::size_t i = 0; i < fused.size(); ++i) {
            std::size_t votes = 0;
            for (const auto& m : cands) votes += m[i] != 0;
            vote_bad += (fused[i] != 0) != (2 * votes > n_total);
        }
    }
    const bool ok = vote_bad + dice_bad + voe_bad + rmsd_bad + identity_bad == 0;
    return {ok, fmt("%d random mask pairs: mismatches vote %zu, dice %zu, voe %zu, rmsd %zu (worst |diff| %.1e <= "
                    "%.0e), identity %zu (worst %.1e <= %.0e)",
                    kOracleTrials, vote_bad, dice_bad, voe_bad, rmsd_bad, worst_rmsd, kRmsdTol, identity_bad,
                    worst_identity, kIdentityTol)};
}

Verdict run_filter_fidelity() {
    const FilterPolicy k = FilterPolicy::knee_pd();
    bool ranges_ok = true;
    std::string detail;
    // Ranges published for the knee PD data: bone positives in [0, 1200], cartilage positives in [800, 3000].
    for (const auto& s : StructureId::knee()) {
        const auto& r = k.ranges.at(s);
        const bool expected = is_cartilage(s) ? (r.lo == 800.0 && r.hi == 3000.0) : (r.lo == 0.0 && r.hi == 1200.0);
        ranges_ok = ranges_ok && expected;
    }
    const auto probe = [&](const StructureId& s, Polarity pol, float value) {
        const Volume3D v(Grid{{5, 5, 3}, {1, 1, 1}, {}}, VolumeKind::intensity, std::vector<float>(75, value));
        const PromptSet ps{"probe", {{{2, 2, 1}, pol, s}, {{1, 1, 1}, Polarity::positive, s}}};
        return filter_prompts(ps, v, k).prompts.prompts.size();
    };
    std::size_t bone_1250 = 0, cart_900 = 0, neg_kept = 0;
    for (const auto& s : {StructureId::femur(), StructureId::tibia()}) {
        bone_1250 += probe(s, Polarity::positive, 1250.0f);
        neg_kept += probe(s, Polarity::negative, 1250.0f);
    }
    for (const auto& s : {StructureId::femoral_cartilage(), StructureId::tibial_cartilage()})
        cart_900 += probe(s, Polarity::positive, 900.0f);
    const bool ok = ranges_ok && bone_1250 == 0 && cart_900 == 4 && neg_kept == 2;
    detail = fmt("bone positives at 1250 kept %zu/4 (expect 0), cartilage positives at 900 kept %zu/4 (expect 4), "
                 "bone negatives at 1250 kept %zu/2 (expect 2), policy ranges bone [0,1200] cartilage [800,3000] %s",
                 bone_1250, cart_900, neg_kept, ranges_ok ? "confirmed" : "MISMATCH");
    return {ok, detail};
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> serialized(const CaseRun& r, const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<std::string> out;
    for (const auto& [s, m] : r.result.fused) {
        const fs::path p = dir / (s.name() + ".nii");
        save_volume(m, p);
        out.push_back(file_bytes(p));
    }
    out.push_back(r.report.to_json().dump());
    out.push_back(r.result.provenance().dump());
    return out;
}

Verdict run_determinism(Pipeline& p) {
    const CaseRun& first = p.image_alignment();
    FusionConfig cfg;
    cfg.threads = 2;
    RegistrationCache fresh(p.pc->target.image);
    const CaseRun second = p.run(Strategy::image_alignment, cfg, &fresh);
    const fs::path root = fs::temp_directory_path() / "regprompt_acceptance";
    fs::remove_all(root);
    const auto a = serialized(first, root / "run1"), b = serialized(second, root / "run2");
    std::size_t differing = 0;
    for (std::size_t i = 0; i < a.size(); ++i) differing += a[i] != b[i];
    return {differing == 0, fmt("I-align with 1 and 2 threads (independent registrations): %zu of %zu artefacts differ "
                                "(4 masks, report, provenance)",
                                differing, a.size())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::set<std::string> only(argv + 1, argv + argc);
    const auto selected = [&](const std::string& key) { return only.empty() || only.contains(key); };

    std::optional<AffineRecovery> affine;
    std::optional<FfdRecovery> ffd;
    Pipeline pipeline;
    int failed = 0;
    const auto report = [&](const std::string& key, const std::string& title, const std::function<Verdict()>& f) {
        if (!selected(key)) return;
        Verdict v;
        try {
            v = f();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failed += !v.pass;
        std::printf("%s %s: %s\n", v.pass ? "PASS" : "FAIL", title.c_str(), v.detail.c_str());
        std::fflush(stdout);
    };
    const auto need_affine = [&]() -> AffineRecovery& {
        if (!affine) affine = run_affine_recovery();
        return *affine;
    };
    const auto need_ffd = [&]() -> FfdRecovery& {
        if (!ffd) ffd = run_ffd_recovery();
        return *ffd;
    };

    report("affine", "registration recovery", [&] { return need_affine().verdict; });
    report("ffd", "FFD recovery", [&] { return need_ffd().verdict; });
    report("gradient", "gradient check", run_gradient_check);
    report("inverse", "inverse transform", [&] {
        std::vector<RecoveryCase> all = need_affine().cases;
        for (const auto& c : need_ffd().cases) all.push_back(c);
        return run_inverse(all);
    });
    report("e2e", "end-to-end I-align", [&] { return run_end_to_end(pipeline); });
    report("cross", "cross-strategy consistency", [&] { return run_cross_strategy(pipeline); });
    report("atlas", "atlas baseline ordering", [&] { return run_atlas_ordering(pipeline); });
    report("oracles", "oracle equivalences", run_oracles);
    report("filter", "filter fidelity", run_filter_fidelity);
    report("determinism", "determinism", [&] { return run_determinism(pipeline); });

    std::printf("%d criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
