# Empty __init__.py for src package