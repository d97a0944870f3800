fn main() { std::process::exit(dimscope::cli::run(std::env::args())); }
