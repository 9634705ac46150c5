//! Hand-set weights that solve recall tasks exactly, and the harness that checks them.

pub mod attention_solver;
pub mod autocorr;
pub mod primitives;
pub mod triples;
pub mod verify;

pub use attention_solver::{solve_mqar_attention, AttentionSolver, MATCH_THRESHOLD};
pub use autocorr::{solve_mqar_autocorr, top_shifts, AutocorrAnswer, ShiftSource};
pub use primitives::{
    build_add, build_remember, build_shift_down, build_shift_up, hyena_as_stack, simulate_hyena_layer, BaseConvStack,
    RememberLayout,
};
pub use triples::{gen_triples, TripleGen, TripleInstance};
pub use verify::{run_suite, CheckRow, Fault, Suite, VerifyOpts};
