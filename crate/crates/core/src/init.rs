//! Story initialization agent: the reference image `R` and the initial
//! panels.
//!
//! Editing mode renders `R` from the merged character descriptions and
//! each panel from `(R, P_i)`. Story mode builds the extended prompt set
//! `P* = [P_0, P_1, ..., P_N]`, renders `R` from `P_0`, and drives the
//! panels as one seeded batch.

use thiserror::Error;

use crate::backend::{BackendError, BackendSuite};
use crate::config::InitMode;
use crate::image::{ContentHash, ImageData};
use crate::memory::{MemoryError, RunStatus, WriterClaim};
use crate::schema::{merged_character_prompt, SchemaError, StoryScript};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("reference generation failed: {0}")]
    Reference(BackendError),
    /// Panels before `index` were kept.
    #[error("panel {index} generation failed: {source}")]
    PartialInit { index: usize, source: BackendError },
    #[error("run is {0:?}, not initializing")]
    NotInitializing(RunStatus),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// `[P_0, P_1, ..., P_N]` with `P_0` the merged character descriptions.
pub fn extended_prompt_set(script: &StoryScript) -> Result<Vec<String>, SchemaError> {
    let mut out = vec![merged_character_prompt(script)?];
    out.extend(script.scenes.iter().map(|s| s.image_prompt.clone()));
    Ok(out)
}

/// Generator seed for panel `i`. Story mode shares the batch seed.
pub fn panel_seed(mode: InitMode, seed: u64, index: usize) -> u64 {
    match mode {
        InitMode::StoryGeneration => seed,
        InitMode::EditingBased => {
            let h = ContentHash::of(&[b"panel".as_slice(), &seed.to_le_bytes(), &(index as u64).to_le_bytes()].concat());
            u64::from_le_bytes(h.0[..8].try_into().expect("8 bytes"))
        }
    }
}

/// One generator call. Both modes render `R` from the merged descriptions,
/// which in story mode is `P_0`.
pub fn build_reference(
    suite: &BackendSuite,
    script: &StoryScript,
    mode: InitMode,
    seed: u64,
) -> Result<ImageData, InitError> {
    let prompt = match mode {
        InitMode::EditingBased => merged_character_prompt(script)?,
        InitMode::StoryGeneration => extended_prompt_set(script)?.remove(0),
    };
    suite.generate(&prompt, seed).map_err(InitError::Reference)
}

/// Generates panels `from..=N` in index order. Stops at the first failing
/// index and returns the panels produced before it alongside the error.
pub fn generate_panels(
    suite: &BackendSuite,
    script: &StoryScript,
    reference: &ImageData,
    mode: InitMode,
    seed: u64,
    from: usize,
    sequential: bool,
) -> (Vec<ImageData>, Option<InitError>) {
    let indices: Vec<usize> = (from..=script.panel_count()).collect();
    let one = |i: usize| {
        let prompt = script.prompt(i).expect("index within script");
        suite.generate_conditioned(reference, prompt, panel_seed(mode, seed, i), i)
    };
    let results: Vec<Result<ImageData, BackendError>> = if sequential || mode == InitMode::StoryGeneration {
        let mut out = Vec::new();
        for &i in &indices {
            let r = one(i);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = indices.iter().map(|&i| s.spawn(move || one(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("panel generation panicked"))
                .collect()
        })
    };
    let mut panels = Vec::new();
    for (i, r) in indices.into_iter().zip(results) {
        match r {
            Ok(img) => panels.push(img),
            Err(source) => return (panels, Some(InitError::PartialInit { index: i, source })),
        }
    }
    (panels, None)
}

/// Builds whatever the run is missing (reference, then panels), committing
/// in index order. Re-running with the same seed and backends reproduces
/// the same images, so an interrupted run continues where it stopped.
pub fn initialize(claim: &WriterClaim, suite: &BackendSuite) -> Result<(), InitError> {
    let state = claim.snapshot();
    if state.status != RunStatus::Initializing {
        return Err(InitError::NotInitializing(state.status));
    }
    let cfg = &state.config;
    let mode = cfg.director.mode;
    let seed = cfg.director.seed;
    let reference = match &state.reference {
        Some(r) => claim.image(r).ok_or_else(|| MemoryError::UnknownImage(r.id.clone()))?,
        None => {
            let r = build_reference(suite, &state.script, mode, seed)?;
            let stored = claim.put_image(&r)?;
            claim.set_reference(&stored)?;
            r
        }
    };
    let (panels, err) = generate_panels(
        suite,
        &state.script,
        &reference,
        mode,
        seed,
        state.panels.len() + 1,
        cfg.director.sequential_init,
    );
    let scale = cfg.controller.initial_scale;
    for (k, img) in panels.iter().enumerate() {
        let stored = claim.put_image(img)?;
        claim.add_panel(state.panels.len() + 1 + k, &stored, scale)?;
    }
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn story_seed_is_shared_editing_seed_is_not() {
        assert_eq!(panel_seed(InitMode::StoryGeneration, 9, 1), panel_seed(InitMode::StoryGeneration, 9, 4));
        assert_ne!(panel_seed(InitMode::EditingBased, 9, 1), panel_seed(InitMode::EditingBased, 9, 4));
    }
}
