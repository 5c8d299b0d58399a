pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod trainer;
