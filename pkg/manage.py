#!/usr/bin/env python
import os
import sys

# subcommands are spelled with hyphens on the command line, Django modules use underscores
HYPHENATED = {'gen-data': 'gen_data'}


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError("Django not available; install requirements.txt") from exc
    argv = list(sys.argv)
    if len(argv) > 1:
        argv[1] = HYPHENATED.get(argv[1], argv[1])
    if len(argv) > 2 and argv[1] == 'help':
        argv[2] = HYPHENATED.get(argv[2], argv[2])
    execute_from_command_line(argv)


if __name__ == '__main__':
    main()
