def pytest_addoption(parser):
    parser.addoption(
        "--run-extended",
        action="store_true",
        default=False,
        help="retrain the long acceptance runs instead of reading results/ (hours of CPU)",
    )
