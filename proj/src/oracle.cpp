#include "attnlab/oracle.hpp"

#include <algorithm>

#include "attnlab/errors.hpp"

namespace attnlab {

std::vector<double> brute_force_redistribute(std::span<const double> row,
                                             const ModalityLayout& layout, Modality source,
                                             std::span<const Modality> recipients,
                                             double fraction) {
    if (row.size() != layout.prompt_len()) {
        throw ShapeError("row length does not match layout");
    }
    if (std::find(recipients.begin(), recipients.end(), source) != recipients.end()) {
        throw InvalidSpec("source modality listed as recipient");
    }

    std::vector<bool> is_source(row.size(), false);
    std::vector<bool> is_recipient(row.size(), false);
    for (std::size_t i = 0; i < row.size(); ++i) {
        const Modality m = modality_of(layout, i);
        is_source[i] = (m == source);
        is_recipient[i] = std::find(recipients.begin(), recipients.end(), m) != recipients.end();
    }

    double source_mass = 0.0;
    double recipient_total = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (is_source[i]) source_mass += row[i];
        if (is_recipient[i]) recipient_total += row[i];
    }

    std::vector<double> out(row.begin(), row.end());
    if (fraction == 0.0 || recipient_total < 1e-12 || source_mass < 1e-12) {
        return out;
    }

    const double moved = fraction * source_mass;
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (is_source[i]) {
            out[i] = row[i] - fraction * row[i];
        } else if (is_recipient[i]) {
            out[i] = row[i] + moved * row[i] / recipient_total;
        }
    }
    return out;
}

}  // namespace attnlab
