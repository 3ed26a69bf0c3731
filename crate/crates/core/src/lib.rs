//! Open-domain continual learning for a toy vision-language dual encoder.

pub mod autodiff;
pub mod codec;
pub mod encoder;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod stream;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod verify;
pub mod vocabulary;
