from ..base import IndependenceTestCommand


class Command(IndependenceTestCommand):
    help = "Unconditional kernel independence test of X and Y on a CSV."

    command_name = "test-ui"
