pub mod adversary;
pub mod clients;
pub mod crypto;
pub mod ids;
pub mod protocol;
pub mod resource_model;
pub mod sim;
pub mod tc;
