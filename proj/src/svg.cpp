// SPDX-License-Identifier: Apache-2.0

#include "nmil/svg.hpp"

#include <algorithm>
#include <sstream>

namespace nmil {

namespace {

constexpr const char* kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759",
                                    "#b07aa1", "#76b7b2", "#edc948", "#9c755f"};

struct Bar {
  double weight;
  int latent;
  std::size_t bag;
};

void collect(const AttentionNode& a, const LatentNode& l, int level, std::size_t& bag_idx,
             std::vector<Bar>& bars) {
  if (a.level == level) {
    for (std::size_t i = 0; i < a.weights.size(); ++i)
      bars.push_back({a.weights[i], l.member_latents[i], bag_idx});
    ++bag_idx;
    return;
  }
  for (std::size_t c = 0; c < a.children.size(); ++c)
    collect(a.children[c], l.children[c], level, bag_idx, bars);
}

}  // namespace

std::string attention_bar_chart(const AttentionRecord& record, int level,
                                const std::string& title) {
  std::vector<Bar> bars;
  std::size_t bag_idx = 0;
  collect(record.attention, record.latents, level, bag_idx, bars);

  const double bar_w = 22.0, gap = 4.0, bag_gap = 18.0, left = 46.0, top = 34.0;
  const double plot_h = 180.0, label_h = 34.0;
  double max_w = 0.0;
  for (const Bar& b : bars) max_w = std::max(max_w, b.weight);
  if (max_w <= 0.0) max_w = 1.0;

  double x = left;
  std::ostringstream body;
  std::size_t prev_bag = bars.empty() ? 0 : bars[0].bag;
  for (const Bar& b : bars) {
    if (b.bag != prev_bag) {
      x += bag_gap;
      prev_bag = b.bag;
    }
    const double h = plot_h * (b.weight / max_w);
    const char* color = kPalette[b.bag % (sizeof(kPalette) / sizeof(kPalette[0]))];
    body << "  <rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar_w
         << "\" height=\"" << h << "\" fill=\"" << color << "\"/>\n";
    body << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << top + plot_h + 16
         << "\" font-size=\"12\" text-anchor=\"middle\">" << b.latent << "</text>\n";
    x += bar_w + gap;
  }
  const double width = x + left;
  const double height = top + plot_h + label_h;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "  <text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  svg << "  <line x1=\"" << left - 6 << "\" y1=\"" << top + plot_h << "\" x2=\""
      << width - left / 2 << "\" y2=\"" << top + plot_h << "\" stroke=\"#444\"/>\n";
  svg << body.str();
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace nmil
