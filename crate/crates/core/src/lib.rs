pub mod cli;
pub mod emu;
pub mod il;
pub mod lifter;
pub mod loader;
pub mod machine;
pub mod obfuscator;
pub mod query;
pub mod smt;
pub mod symex;
pub mod x86;
