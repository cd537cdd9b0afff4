#pragma once

#include <stdexcept>
#include <string>

namespace maebench {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension disagreement between operands.
struct dim_error : error {
    using error::error;
};

// Index outside the valid range of a tensor axis.
struct index_error : error {
    using error::error;
};

// An API precondition was violated (non-scalar loss, empty input, ...).
struct contract_error : error {
    using error::error;
};

// Invalid configuration value or unknown config key.
struct config_error : error {
    using error::error;
};

// File could not be opened / read / written.
struct io_error : error {
    using error::error;
};

// File content is not in a supported format.
struct format_error : error {
    using error::error;
};

// Structured text (manifest, config) failed to parse.
struct parse_error : error {
    using error::error;
};

// Parsed data violates a domain invariant (bad box, bad label vector).
struct validation_error : error {
    using error::error;
};

// Stored payload does not match its recorded hash.
struct integrity_error : error {
    using error::error;
};

// Resampling cannot produce a sample the metric is defined on.
struct degenerate_sample_error : error {
    using error::error;
};

// Metric is undefined on the given sample (e.g. single-class AUROC).
struct undefined_metric_error : error {
    using error::error;
};

// Training produced a non-finite value.
struct numeric_error : error {
    using error::error;
};

// Reports sharing a table must agree on the class list.
struct schema_error : error {
    using error::error;
};

}  // namespace maebench
