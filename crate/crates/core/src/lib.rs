pub mod attention;
pub mod commands;
pub mod config;
pub mod device;
pub mod kv;
pub mod model;
pub mod sim;
pub mod tier;
pub mod verify;
pub mod workload;
