mod common;

#[test]
fn byol_rerun_and_resume_match() {
    common::determinism_byol().unwrap();
}

#[test]
fn finetune_rerun_and_resume_match() {
    common::determinism_finetune().unwrap();
}
