pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod eval;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod tsne;
pub mod unet;
