fn main() {
    std::process::exit(edat_bench::cli::main_with(std::env::args_os()));
}
