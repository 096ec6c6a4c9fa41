fn main() {
    std::process::exit(tangle::cli::run(std::env::args()));
}
