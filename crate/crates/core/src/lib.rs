pub mod data_io;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
