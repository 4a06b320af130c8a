pub mod afp;
pub mod branching;
pub mod distribution;
pub mod flow;
pub mod fv;
pub mod graphical;
pub mod model;
pub mod oracle;
pub mod replicas;
pub mod return_process;
pub mod rng;
pub mod simulate;
pub mod tree;
pub mod zoo;
