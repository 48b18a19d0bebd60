// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "nmil/train.hpp"

namespace nmil {

// Bar chart of the attention weights at one level of a sample: bars grouped
// by bag, one bar per member, annotated with the member's latent label.
std::string attention_bar_chart(const AttentionRecord& record, int level,
                                const std::string& title);

}  // namespace nmil
