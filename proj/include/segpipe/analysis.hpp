#ifndef SEGPIPE_ANALYSIS_HPP
#define SEGPIPE_ANALYSIS_HPP

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "segpipe/blocks.hpp"
#include "segpipe/data.hpp"

namespace segpipe {

struct StageClassHistogram {
    std::string stage;  // "input" or "preprocessed"
    int cls = 0;
    double min = 0, max = 0;
    double mu = 0, sigma = 0;  // maximum-likelihood normal fit
    std::vector<double> edges;          // bins + 1
    std::vector<std::int64_t> counts;   // bins
    std::int64_t total = 0;
};

struct HistogramReport {
    std::vector<StageClassHistogram> entries;
    bool trained = true;  // false flags an untrained checkpoint
};

/// Per-class intensity histograms of the pipeline input and of the learned
/// pre-processor's output over a dataset. Non-void mask pixels define class
/// membership; counts per (stage, class) therefore sum to the class's pixel
/// count. Bin ranges are the observed min/max per stage and class.
template <class T>
HistogramReport analyze_normalization(Pipeline<T>& model, const Dataset<T>& ds, int bins,
                                      bool trained_flag = true) {
    if (bins < 1) throw ConfigError("histogram needs at least one bin");
    if (ds.size() == 0) throw ConfigError("analysis dataset is empty");

    std::vector<int> classes;
    for (const auto& [name, v] : ds.class_map()) classes.push_back(v);
    std::sort(classes.begin(), classes.end());

    // pass 1: per (stage, class) extrema and moments
    struct Acc {
        double mn = std::numeric_limits<double>::infinity();
        double mx = -std::numeric_limits<double>::infinity();
        double sum = 0, sum2 = 0;
        std::int64_t n = 0;
    };
    const int S = 2;  // input, preprocessed
    std::vector<Acc> acc(static_cast<std::size_t>(S) * classes.size());
    auto slot = [&](int stage, std::size_t ci) -> Acc& {
        return acc[static_cast<std::size_t>(stage) * classes.size() + ci];
    };

    std::vector<Tensor<T>> pre_outputs(ds.size());
    std::vector<Sample<T>> samples(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        samples[i] = ds.get(i);
        if (!samples[i].has_mask())
            throw ConfigError("analysis needs masks; record " + samples[i].id + " has none");
        Graph<T> g(Mode::eval);
        auto out = model.fcn.forward(
            g, g.input(samples[i].image.reshaped(
                   {1, 1, samples[i].image.extent(1), samples[i].image.extent(2)})));
        pre_outputs[i] = g.value(out).clone();
    }

    auto scan = [&](auto&& visit) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const Tensor<T>& mask = samples[i].mask;
            const Tensor<T>& img = samples[i].image;
            const Tensor<T>& pre = pre_outputs[i];
            for (std::int64_t k = 0; k < mask.numel(); ++k) {
                const int label = static_cast<int>(mask[k]);
                if (label == ds.void_label()) continue;
                for (std::size_t ci = 0; ci < classes.size(); ++ci) {
                    if (classes[ci] != label) continue;
                    visit(0, ci, static_cast<double>(img[k]));
                    visit(1, ci, static_cast<double>(pre[k]));
                }
            }
        }
    };

    scan([&](int stage, std::size_t ci, double v) {
        Acc& a = slot(stage, ci);
        a.mn = std::min(a.mn, v);
        a.mx = std::max(a.mx, v);
        a.sum += v;
        a.sum2 += v * v;
        ++a.n;
    });

    HistogramReport rep;
    rep.trained = trained_flag;
    for (int stage = 0; stage < S; ++stage)
        for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            const Acc& a = slot(stage, ci);
            StageClassHistogram h;
            h.stage = stage == 0 ? "input" : "preprocessed";
            h.cls = classes[ci];
            h.total = a.n;
            h.counts.assign(static_cast<std::size_t>(bins), 0);
            if (a.n > 0) {
                h.min = a.mn;
                h.max = a.mx;
                h.mu = a.sum / static_cast<double>(a.n);
                const double var = a.sum2 / static_cast<double>(a.n) - h.mu * h.mu;
                h.sigma = var > 0 ? std::sqrt(var) : 0.0;
            }
            h.edges.resize(static_cast<std::size_t>(bins) + 1);
            const double width = (h.max - h.min) / bins;
            for (int b = 0; b <= bins; ++b)
                h.edges[static_cast<std::size_t>(b)] = h.min + width * b;
            rep.entries.push_back(std::move(h));
        }

    // pass 2: counts over the observed ranges (max clamps into the last bin)
    scan([&](int stage, std::size_t ci, double v) {
        StageClassHistogram& h =
            rep.entries[static_cast<std::size_t>(stage) * classes.size() + ci];
        if (h.total == 0) return;
        int b = 0;
        if (h.max > h.min)
            b = std::min(bins - 1, static_cast<int>((v - h.min) / (h.max - h.min) * bins));
        ++h.counts[static_cast<std::size_t>(b)];
    });
    return rep;
}

namespace detail {

inline std::string hist_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

/// Plot-ready CSV: one row per bin with stage/class tags.
inline void write_histogram_csv(const HistogramReport& rep, const fs::path& path) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        os << "stage,class,bin_left,bin_right,count\n";
        for (const auto& h : rep.entries)
            for (std::size_t b = 0; b < h.counts.size(); ++b)
                os << h.stage << ',' << h.cls << ',' << detail::hist_num(h.edges[b]) << ','
                   << detail::hist_num(h.edges[b + 1]) << ',' << h.counts[b] << "\n";
    }
    fs::rename(tmp, path);
}

/// Summary CSV: value range and (unless the fit is disabled) the fitted
/// normal per stage/class.
inline void write_histogram_summary_csv(const HistogramReport& rep, const fs::path& path,
                                        bool fit = true) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        os << "stage,class,mu,sigma,min,max,pixels,trained\n";
        for (const auto& h : rep.entries) {
            os << h.stage << ',' << h.cls << ',';
            if (fit)
                os << detail::hist_num(h.mu) << ',' << detail::hist_num(h.sigma);
            else
                os << ',';
            os << ',' << detail::hist_num(h.min) << ',' << detail::hist_num(h.max) << ','
               << h.total << ',' << (rep.trained ? 1 : 0) << "\n";
        }
    }
    fs::rename(tmp, path);
}

} // namespace segpipe

#endif
