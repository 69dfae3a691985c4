fn main() {
    std::process::exit(efr::cli::main_exit_code());
}
