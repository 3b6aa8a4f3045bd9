#![allow(dead_code)]

pub mod naive_planner;
pub mod planner_cases;
pub mod reference_model;
pub mod wire_cases;
