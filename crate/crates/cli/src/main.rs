fn main() {
    std::process::exit(crowdgraph::cli::main_with(std::env::args_os()));
}
