"""Reconstruction from measurement records: catalogs, statistics, dipole maps."""

from .catalog import CatalogOptions, Event, PeakCandidate, build_catalog, detect_peaks, localize_events, merge_events
from .dipoles import DipoleOptions, Registration, dipole_map, fit_dipoles, modal_orientation, permutation_test, register_ncs
from .records import (
    CATALOG_HEADER,
    MatchResult,
    MoleculeRecord,
    catalog_from_json,
    catalog_from_truth,
    catalog_to_json,
    match_to_truth,
    read_catalog_csv,
    site_label,
    write_catalog_csv,
)
from .stats import (
    DiffusionStat,
    PairHistograms,
    PairStat,
    PairTable,
    SuperResImage,
    close_pair_count,
    cohort_summary,
    diffusion_stats,
    expected_close_pairs,
    pair_statistics,
    read_pgm,
    render_superres,
    write_pgm,
)
