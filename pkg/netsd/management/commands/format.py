from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from netsd.exceptions import NetSdError
from netsd.fatfs import FatVolume, ImageDevice
from netsd.gateway import parse_size
from netsd.sd_core import BLOCK_SIZE, FileImage


class Command(BaseCommand):
    help = "Create (or overwrite) a raw image holding an empty FAT16/FAT32 volume."

    def add_arguments(self, parser):
        parser.add_argument("--image", default="sd.img", help="image file to write")
        parser.add_argument("--capacity", default="64MiB", help="image size, e.g. 64MiB")
        parser.add_argument("--label", default="NO NAME", help="volume label (11 characters)")
        parser.add_argument("--force", action="store_true", help="overwrite an existing image")

    def handle(self, *args, **options):
        try:
            capacity = parse_size(options["capacity"])
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        if capacity <= 0 or capacity % BLOCK_SIZE:
            raise CommandError(f"capacity must be a positive multiple of {BLOCK_SIZE} bytes")
        label = options["label"].upper()
        if len(label) > 11 or not label.isascii():
            raise CommandError("label must be at most 11 ASCII characters")

        path = Path(options["image"])
        if path.exists() and not options["force"]:
            raise CommandError(f"{path} exists; pass --force to overwrite it")
        if not path.parent.is_dir():
            raise CommandError(f"directory {path.parent} does not exist")

        backing = FileImage(path, capacity)
        try:
            volume = FatVolume.format(ImageDevice(backing), capacity, label=label)
            info = volume.info()
            backing.flush()
        except NetSdError as exc:
            raise CommandError(f"cannot format {path}: {exc}") from exc
        finally:
            backing.close()

        self.stdout.write(self.style.SUCCESS(
            f"{path}: {info['fat_type']} volume {info['label']!r}, "
            f"{info['clusters']} clusters of {info['cluster_bytes']} bytes"
        ))
