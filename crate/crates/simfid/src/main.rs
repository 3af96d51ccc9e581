fn main() {
    std::process::exit(simfid::cli::run());
}
