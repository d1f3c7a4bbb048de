pub mod autodiff;
pub mod corpus;
pub mod eval;
pub mod grid;
pub mod kb;
pub mod losses;
pub mod model;
pub mod text;
pub mod trainer;
