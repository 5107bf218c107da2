pub mod checkpoint;
pub mod dataforge;
pub mod detector;
pub mod distill;
pub mod evalkit;
pub mod fusion;
pub mod llm_pipeline;
pub mod lang_vision;
pub mod losses;
pub mod matching;
pub mod nn;
pub mod numerics;
pub mod raster;
