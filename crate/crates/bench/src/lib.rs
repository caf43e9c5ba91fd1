//! Shared fixtures for the criterion benches.

use std::collections::BTreeSet;

use iceedit_core::harness::{generate_case, CorpusSpec, DESK_SIGMA};
use iceedit_core::interaction::{encode_edit, select_test_edit, EditConfig, EditRecord};
use iceedit_core::phantom::CaseBundle;

pub fn edit_config() -> EditConfig {
    EditConfig {
        sigma_enc: DESK_SIGMA,
        sigma_edit: DESK_SIGMA,
        ..EditConfig::default()
    }
}

/// A default-size test case and the edit the harness would give it.
pub fn case_with_edit() -> (CaseBundle, EditRecord) {
    let spec = CorpusSpec::default();
    let case = generate_case(&spec, "bench-000", 1, 0).expect("default corpus spec is valid");
    let cfg = edit_config();
    let planes = case.frames.planes();
    let edit = select_test_edit(&case.y_init, &case.cas_contours, &case.frames, &planes, &BTreeSet::new(), &cfg)
        .expect("initial segmentation has a contour");
    let record = encode_edit(&edit.scribble, case.meta, cfg.sigma_enc, cfg.sigma_edit, 1).expect("scribble in grid");
    (case, record)
}
