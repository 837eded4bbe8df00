fn main() {
    std::process::exit(mapunetr::cli::run(std::env::args_os()));
}
