pub mod coach;
pub mod domain;
pub mod layout;
pub mod ports;
pub mod assist;
pub mod components;
